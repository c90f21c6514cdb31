use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 6;

/// The six fallacy categories, in the fixed project-wide order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FallacyClass {
    #[serde(rename = "AE")]
    AppealToEmotion,
    #[serde(rename = "AA")]
    AppealToAuthority,
    #[serde(rename = "AH")]
    AdHominem,
    #[serde(rename = "FC")]
    FalseCause,
    #[serde(rename = "SS")]
    SlipperySlope,
    #[serde(rename = "S")]
    Slogan,
}

impl FallacyClass {
    pub const ALL: [FallacyClass; NUM_CLASSES] = [
        FallacyClass::AppealToEmotion,
        FallacyClass::AppealToAuthority,
        FallacyClass::AdHominem,
        FallacyClass::FalseCause,
        FallacyClass::SlipperySlope,
        FallacyClass::Slogan,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn abbrev(self) -> &'static str {
        match self {
            FallacyClass::AppealToEmotion => "AE",
            FallacyClass::AppealToAuthority => "AA",
            FallacyClass::AdHominem => "AH",
            FallacyClass::FalseCause => "FC",
            FallacyClass::SlipperySlope => "SS",
            FallacyClass::Slogan => "S",
        }
    }
}

impl fmt::Display for FallacyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.abbrev())
    }
}

impl FromStr for FallacyClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.abbrev().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Parse(format!("unknown fallacy class `{s}`")))
    }
}

/// Raw class scores in [`FallacyClass::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Logits(pub [f64; NUM_CLASSES]);

impl Logits {
    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; NUM_CLASSES] = values.try_into().map_err(|_| {
            Error::contract(format!(
                "expected {NUM_CLASSES} logits, got {}",
                values.len()
            ))
        })?;
        if arr.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "logits" });
        }
        Ok(Logits(arr))
    }

    pub fn scores(&self) -> &[f64; NUM_CLASSES] {
        &self.0
    }

    /// Highest-scoring class; ties resolve to the earlier class.
    pub fn argmax(&self) -> FallacyClass {
        let mut best = 0;
        for i in 1..NUM_CLASSES {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        FallacyClass::ALL[best]
    }
}
