//! Debate datasets: JSONL storage, context lookup, stratified splitting,
//! class weights.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{wav_duration, write_wav, AudioClip, AudioSource, DurationRecord};
use crate::error::{Error, Result};
use crate::fusion::ContextWindow;
use crate::labels::{FallacyClass, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq)]
pub enum AudioRef {
    File(PathBuf),
    Inline(AudioClip),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DebateEntry {
    pub debate_id: String,
    pub index: usize,
    pub text: String,
    pub label: FallacyClass,
    pub audio: Option<AudioRef>,
}

impl DebateEntry {
    /// Stable identifier `debate_id:index`.
    pub fn id(&self) -> String {
        format!("{}:{}", self.debate_id, self.index)
    }
}

/// On-disk record, one JSON object per line.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryRecord {
    debate_id: String,
    index: usize,
    text: String,
    label: FallacyClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    audio: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    entries: Vec<DebateEntry>,
    /// Positions of each debate's entries, sorted by index.
    debates: BTreeMap<String, Vec<usize>>,
    /// Rank of each entry within its debate.
    rank: Vec<usize>,
}

impl Dataset {
    pub fn new(entries: Vec<DebateEntry>) -> Result<Self> {
        let mut debates: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (pos, e) in entries.iter().enumerate() {
            debates.entry(e.debate_id.clone()).or_default().push(pos);
        }
        let mut rank = vec![0; entries.len()];
        for (id, positions) in debates.iter_mut() {
            positions.sort_by_key(|&p| entries[p].index);
            for w in positions.windows(2) {
                if entries[w[0]].index == entries[w[1]].index {
                    return Err(Error::contract(format!(
                        "duplicate index {} in debate {id}",
                        entries[w[0]].index
                    )));
                }
            }
            for (r, &p) in positions.iter().enumerate() {
                rank[p] = r;
            }
        }
        Ok(Dataset {
            entries,
            debates,
            rank,
        })
    }

    pub fn entries(&self) -> &[DebateEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<FallacyClass> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn debate_count(&self) -> usize {
        self.debates.len()
    }

    /// Positions of the up to `n` entries immediately preceding `pos` in its
    /// debate, oldest first.
    pub fn context_positions(&self, pos: usize, n: usize) -> Vec<usize> {
        let e = &self.entries[pos];
        let order = &self.debates[&e.debate_id];
        let r = self.rank[pos];
        order[r.saturating_sub(n)..r].to_vec()
    }

    pub fn context_window(&self, pos: usize, n: usize) -> ContextWindow {
        ContextWindow {
            size: n,
            sentences: self
                .context_positions(pos, n)
                .into_iter()
                .map(|p| self.entries[p].text.clone())
                .collect(),
        }
    }

    /// The entry's own audio as preprocessing sources (empty when absent).
    pub fn audio_sources(&self, pos: usize) -> Vec<AudioSource> {
        match &self.entries[pos].audio {
            Some(AudioRef::File(p)) => vec![AudioSource::File(p.clone())],
            Some(AudioRef::Inline(c)) => vec![AudioSource::Clip(c.clone())],
            None => Vec::new(),
        }
    }

    pub fn context_audio_sources(&self, pos: usize, n: usize) -> Vec<AudioSource> {
        self.context_positions(pos, n)
            .into_iter()
            .flat_map(|p| self.audio_sources(p))
            .collect()
    }

    /// Per-entry audio durations; entries without audio count as 0 s.
    pub fn durations(&self) -> Result<Vec<DurationRecord>> {
        self.entries
            .iter()
            .map(|e| {
                let seconds = match &e.audio {
                    Some(AudioRef::File(p)) => wav_duration(p)?,
                    Some(AudioRef::Inline(c)) => c.duration(),
                    None => 0.0,
                };
                Ok(DurationRecord {
                    debate_id: e.debate_id.clone(),
                    index: e.index,
                    label: e.label,
                    seconds,
                })
            })
            .collect()
    }

    /// Reads one JSON record per line; relative audio paths resolve against
    /// the file's directory.
    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::read_jsonl(std::io::BufReader::new(f), &base)
    }

    pub fn read_jsonl(r: impl BufRead, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<dataset>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EntryRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("dataset line {}: {e}", n + 1)))?;
            entries.push(DebateEntry {
                debate_id: rec.debate_id,
                index: rec.index,
                text: rec.text,
                label: rec.label,
                audio: rec
                    .audio
                    .map(|p| AudioRef::File(if p.is_absolute() { p } else { base.join(p) })),
            });
        }
        Self::new(entries)
    }

    /// Writes JSONL. File paths are written relative to `base` when possible;
    /// inline audio must be externalized first.
    pub fn write_jsonl(&self, mut w: impl Write, base: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            let audio = match &e.audio {
                None => None,
                Some(AudioRef::File(p)) => Some(
                    p.strip_prefix(base)
                        .map(Path::to_path_buf)
                        .unwrap_or_else(|_| p.clone()),
                ),
                Some(AudioRef::Inline(_)) => {
                    return Err(Error::contract(format!(
                        "entry {} has inline audio; write it to disk first",
                        e.id()
                    )))
                }
            };
            let rec = EntryRecord {
                debate_id: e.debate_id.clone(),
                index: e.index,
                text: e.text.clone(),
                label: e.label,
                audio,
            };
            out.push_str(&serde_json::to_string(&rec).map_err(|e| Error::Parse(e.to_string()))?);
            out.push('\n');
        }
        w.write_all(out.as_bytes())
            .map_err(|e| Error::io("<dataset>", e))
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_jsonl(std::io::BufWriter::new(f), &base)
    }

    /// Writes inline clips as `dir/<debate>_<index>.wav` and points the
    /// entries at those files.
    pub fn externalize_audio(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for e in &mut self.entries {
            if let Some(AudioRef::Inline(clip)) = &e.audio {
                let path = dir.join(format!("{}_{}.wav", e.debate_id, e.index));
                write_wav(&path, clip)?;
                e.audio = Some(AudioRef::File(path));
            }
        }
        Ok(())
    }
}

/// Class of every position, grouped: `by_class[c]` lists positions labelled `c`.
fn positions_by_class(labels: &[FallacyClass]) -> [Vec<usize>; NUM_CLASSES] {
    let mut by_class: [Vec<usize>; NUM_CLASSES] = Default::default();
    for (i, l) in labels.iter().enumerate() {
        by_class[l.index()].push(i);
    }
    by_class
}

/// Per-class shuffled split. Each class with `n` entries sends
/// `round(n * (1 - train_fraction))`, clamped to `[1, n - 1]`, to validation.
/// Returns sorted `(train, validation)` positions. Classes absent from the
/// data are skipped.
pub fn stratified_split(
    labels: &[FallacyClass],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&train_fraction) || train_fraction == 0.0 {
        return Err(Error::contract(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (c, mut positions) in positions_by_class(labels).into_iter().enumerate() {
        let n = positions.len();
        if n == 0 {
            continue;
        }
        if n < 2 {
            return Err(Error::contract(format!(
                "class {} has {n} entry; at least 2 are needed to split",
                FallacyClass::ALL[c]
            )));
        }
        positions.shuffle(&mut rng);
        let n_val = ((n as f64 * (1.0 - train_fraction)).round() as usize).clamp(1, n - 1);
        val.extend_from_slice(&positions[..n_val]);
        train.extend_from_slice(&positions[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Inverse class frequency normalized to mean 1: `total / (6 * count_c)`.
pub fn compute_class_weights(labels: &[FallacyClass]) -> Result<[f64; NUM_CLASSES]> {
    let mut counts = [0usize; NUM_CLASSES];
    for l in labels {
        counts[l.index()] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::contract(format!(
            "class {} missing from the training split",
            FallacyClass::ALL[c]
        )));
    }
    let total = labels.len() as f64;
    Ok(counts.map(|n| total / (NUM_CLASSES as f64 * n as f64)))
}

/// Per-class entry counts.
pub fn class_counts(labels: &[FallacyClass]) -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    for l in labels {
        counts[l.index()] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(debate: &str, index: usize, label: usize) -> DebateEntry {
        DebateEntry {
            debate_id: debate.into(),
            index,
            text: format!("s{index}"),
            label: FallacyClass::ALL[label],
            audio: None,
        }
    }

    #[test]
    fn context_comes_from_preceding_entries_of_the_same_debate() {
        let ds = Dataset::new(vec![
            entry("b", 0, 0),
            entry("a", 2, 0),
            entry("a", 0, 1),
            entry("a", 1, 2),
        ])
        .unwrap();
        assert_eq!(ds.context_positions(1, 6), [2, 3]);
        assert_eq!(ds.context_positions(1, 1), [3]);
        assert!(ds.context_positions(0, 3).is_empty());
        assert_eq!(ds.context_window(1, 2).sentences, ["s0", "s1"]);
        assert!(Dataset::new(vec![entry("a", 0, 0), entry("a", 0, 1)]).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let mut e = entry("d", 0, 3);
        e.audio = Some(AudioRef::File(PathBuf::from("/data/x/a.wav")));
        let ds = Dataset::new(vec![e, entry("d", 1, 4)]).unwrap();
        let mut buf = Vec::new();
        ds.write_jsonl(&mut buf, Path::new("/data")).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\"audio\":\"x/a.wav\""));
        assert!(!text.contains("context"));
        let back = Dataset::read_jsonl(buf.as_slice(), Path::new("/data")).unwrap();
        assert_eq!(back, ds);
        assert!(Dataset::read_jsonl("{\"nope\":1}".as_bytes(), Path::new(".")).is_err());
    }

    #[test]
    fn split_example_proportions() {
        let counts = [50, 20, 10, 10, 5, 5];
        let labels: Vec<FallacyClass> = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(FallacyClass::ALL[c], n))
            .collect();
        let (train, val) = stratified_split(&labels, 0.8, 7).unwrap();
        let val_labels: Vec<_> = val.iter().map(|&i| labels[i]).collect();
        assert_eq!(class_counts(&val_labels), [10, 4, 2, 2, 1, 1]);
        assert_eq!(train.len() + val.len(), 100);
        assert_eq!(stratified_split(&labels, 0.8, 7).unwrap(), (train, val));
    }

    #[test]
    fn split_rejects_singleton_class() {
        let labels = [
            FallacyClass::AppealToEmotion,
            FallacyClass::AppealToEmotion,
            FallacyClass::Slogan,
        ];
        let err = stratified_split(&labels, 0.8, 0).unwrap_err().to_string();
        assert!(err.contains('S'), "{err}");
    }

    #[test]
    fn class_weight_examples() {
        let uniform: Vec<_> = FallacyClass::ALL.to_vec();
        assert_eq!(compute_class_weights(&uniform).unwrap(), [1.0; 6]);
        let mut skewed = uniform.clone();
        skewed.push(FallacyClass::AppealToEmotion);
        let w = compute_class_weights(&skewed).unwrap();
        let expect = [
            7.0 / 12.0,
            7.0 / 6.0,
            7.0 / 6.0,
            7.0 / 6.0,
            7.0 / 6.0,
            7.0 / 6.0,
        ];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(compute_class_weights(&uniform[..5]).is_err());
    }
}
