//! Synthetic debate corpus with a controllable dependence on context.
//!
//! Every sentence carries one cue word `a` in {0, 1, 2} (probabilities
//! 0.5 / 0.25 / 0.25) and one marker word `b` in {0, 1} (probability of 0 is
//! 0.6), mixed into filler words. The label is a fixed function of `(a, b')`:
//!
//! | a \ b' | 0  | 1  |
//! |--------|----|----|
//! | 0      | AE | AA |
//! | 1      | AH | FC |
//! | 2      | S  | SS |
//!
//! With [`ContextSignal::None`], `b'` is the sentence's own marker. With
//! [`ContextSignal::Required`], `b'` is the marker of the previous sentence in
//! the debate (0 for the first sentence) and the sentence's own marker is
//! noise, so a model without context cannot beat
//! [`required_signal_bayes_floor`]. Audio is a sinusoid whose pitch depends
//! on the label, plus Gaussian noise.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::{AudioRef, Dataset, DebateEntry};
use crate::audio::{AudioClip, TARGET_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::labels::FallacyClass;

pub const CUE_WORDS: [&str; 3] = ["ember", "quartz", "violet"];
pub const MARKER_WORDS: [&str; 2] = ["north", "south"];
const FILLERS: [&str; 30] = [
    "we", "must", "the", "people", "this", "nation", "will", "never", "they", "our", "country",
    "always", "plan", "future", "tax", "jobs", "you", "know", "it", "is", "that", "a", "great",
    "really", "believe", "today", "vote", "law", "economy", "freedom",
];
pub const MIN_DEBATE_LEN: usize = 8;
pub const MAX_DEBATE_LEN: usize = 16;
pub const MARKER_ZERO_PROB: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextSignal {
    None,
    Required,
}

impl fmt::Display for ContextSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextSignal::None => "none",
            ContextSignal::Required => "required",
        })
    }
}

impl FromStr for ContextSignal {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ContextSignal::None),
            "required" => Ok(ContextSignal::Required),
            _ => Err(Error::Parse(format!("unknown context signal `{s}`"))),
        }
    }
}

pub fn label_for(a: usize, b: usize) -> FallacyClass {
    use FallacyClass::*;
    [
        [AppealToEmotion, AppealToAuthority],
        [AdHominem, FalseCause],
        [Slogan, SlipperySlope],
    ][a][b]
}

/// Best accuracy reachable without context on a `Required` corpus: first
/// sentences are predictable, the rest only at the marker prior.
pub fn required_signal_bayes_floor(n_entries: usize, n_debates: usize) -> f64 {
    let first = n_debates as f64 / n_entries as f64;
    first + (1.0 - first) * MARKER_ZERO_PROB
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_entries: usize,
    pub context_signal: ContextSignal,
    pub seed: u64,
    pub with_audio: bool,
    pub min_audio_seconds: f64,
    pub max_audio_seconds: f64,
    pub audio_noise: f64,
}

impl SynthConfig {
    pub fn new(n_entries: usize, context_signal: ContextSignal, seed: u64) -> Self {
        SynthConfig {
            n_entries,
            context_signal,
            seed,
            with_audio: true,
            min_audio_seconds: 0.2,
            max_audio_seconds: 0.6,
            audio_noise: 0.3,
        }
    }
}

fn sentence(a: usize, b: usize, rng: &mut ChaCha8Rng) -> String {
    let n_fill = rng.random_range(3..=6);
    let mut words: Vec<&str> = (0..n_fill)
        .map(|_| FILLERS[rng.random_range(0..FILLERS.len())])
        .collect();
    let pa = rng.random_range(0..=words.len());
    words.insert(pa, CUE_WORDS[a]);
    let pb = rng.random_range(0..=words.len());
    words.insert(pb, MARKER_WORDS[b]);
    format!("{} .", words.join(" "))
}

/// Pitch rises with the class index.
pub fn class_pitch(label: FallacyClass) -> f64 {
    160.0 + 60.0 * label.index() as f64
}

fn clip(label: FallacyClass, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> AudioClip {
    let seconds = rng.random_range(cfg.min_audio_seconds..=cfg.max_audio_seconds);
    let n = (seconds * TARGET_SAMPLE_RATE as f64).round() as usize;
    let noise = Normal::new(0.0, cfg.audio_noise).expect("noise std");
    let freq = class_pitch(label);
    let phase = rng.random_range(0.0..2.0 * PI);
    let samples = (0..n)
        .map(|i| {
            0.5 * (2.0 * PI * freq * i as f64 / TARGET_SAMPLE_RATE as f64 + phase).sin()
                + noise.sample(rng)
        })
        .collect();
    AudioClip::new(samples, TARGET_SAMPLE_RATE)
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.n_entries < 120 {
        return Err(Error::contract(format!(
            "synthetic corpus needs at least 120 entries, got {}",
            cfg.n_entries
        )));
    }
    if !(0.0 < cfg.min_audio_seconds && cfg.min_audio_seconds <= cfg.max_audio_seconds) {
        return Err(Error::contract(
            "audio duration range must be positive and ordered",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::with_capacity(cfg.n_entries);
    let mut debate = 0;
    while entries.len() < cfg.n_entries {
        let len = rng
            .random_range(MIN_DEBATE_LEN..=MAX_DEBATE_LEN)
            .min(cfg.n_entries - entries.len());
        let mut prev_marker = 0;
        for index in 0..len {
            let u: f64 = rng.random();
            let a = if u < 0.5 {
                0
            } else if u < 0.75 {
                1
            } else {
                2
            };
            let b = usize::from(rng.random::<f64>() >= MARKER_ZERO_PROB);
            let label = match cfg.context_signal {
                ContextSignal::None => label_for(a, b),
                ContextSignal::Required => label_for(a, prev_marker),
            };
            prev_marker = b;
            let text = sentence(a, b, &mut rng);
            let audio = cfg
                .with_audio
                .then(|| AudioRef::Inline(clip(label, cfg, &mut rng)));
            entries.push(DebateEntry {
                debate_id: format!("d{debate:03}"),
                index,
                text,
                label,
                audio,
            });
        }
        debate += 1;
    }
    Dataset::new(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::class_counts;

    #[test]
    fn same_seed_same_corpus() {
        let cfg = SynthConfig::new(150, ContextSignal::Required, 3);
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        let mut ja = Vec::new();
        let mut jb = Vec::new();
        let mut text_only = cfg.clone();
        text_only.with_audio = false;
        generate_synthetic(&text_only)
            .unwrap()
            .write_jsonl(&mut ja, std::path::Path::new("."))
            .unwrap();
        generate_synthetic(&text_only)
            .unwrap()
            .write_jsonl(&mut jb, std::path::Path::new("."))
            .unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn labels_follow_the_construction() {
        for signal in [ContextSignal::None, ContextSignal::Required] {
            let mut cfg = SynthConfig::new(400, signal, 11);
            cfg.with_audio = false;
            let ds = generate_synthetic(&cfg).unwrap();
            assert_eq!(ds.len(), 400);
            let find = |text: &str, words: &[&str]| {
                words
                    .iter()
                    .position(|w| text.split(' ').any(|t| t == *w))
                    .unwrap()
            };
            for (pos, e) in ds.entries().iter().enumerate() {
                let a = find(&e.text, &CUE_WORDS);
                let b = match signal {
                    ContextSignal::None => find(&e.text, &MARKER_WORDS),
                    ContextSignal::Required => ds
                        .context_positions(pos, 1)
                        .first()
                        .map_or(0, |&p| find(&ds.entries()[p].text, &MARKER_WORDS)),
                };
                assert_eq!(e.label, label_for(a, b));
            }
            let counts = class_counts(&ds.labels());
            assert!(counts.iter().all(|&c| c >= 2));
            assert_eq!(
                counts.iter().enumerate().max_by_key(|&(_, c)| c).unwrap().0,
                0
            );
        }
    }

    #[test]
    fn audio_length_and_rate() {
        let ds = generate_synthetic(&SynthConfig::new(120, ContextSignal::None, 1)).unwrap();
        for e in ds.entries() {
            let Some(AudioRef::Inline(c)) = &e.audio else {
                panic!("missing audio")
            };
            assert_eq!(c.sample_rate, 16_000);
            assert!(c.duration() >= 0.2 - 1e-9 && c.duration() <= 0.6 + 1e-9);
        }
        assert!(generate_synthetic(&SynthConfig::new(100, ContextSignal::None, 1)).is_err());
    }
}
