//! Audio preprocessing, the downsampling audio encoder, audio classifiers and
//! clip-length statistics.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{FallacyClass, Logits, NUM_CLASSES};
use crate::nn::{set_trainable, weighted_row_sum, LayerNorm, Linear, Mlp, Mode, TransformerBlock};
use crate::params::{init_normal, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const TARGET_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_MAX_SECONDS: f64 = 15.0;
pub const SILENCE_SECONDS: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        AudioClip {
            samples,
            sample_rate,
        }
    }

    pub fn silence(seconds: f64, sample_rate: u32) -> Self {
        let n = (seconds * sample_rate as f64).round() as usize;
        AudioClip::new(vec![0.0; n], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// One preprocessing input: a WAV file or an in-memory buffer.
#[derive(Debug, Clone, PartialEq)]
pub enum AudioSource {
    File(PathBuf),
    Clip(AudioClip),
}

impl AudioSource {
    fn describe(&self, i: usize) -> String {
        match self {
            AudioSource::File(p) => p.display().to_string(),
            AudioSource::Clip(_) => format!("buffer #{i}"),
        }
    }
}

/// Reads a mono PCM WAV (integer or float samples). Integer samples are
/// scaled to [-1, 1).
pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let item = path.display().to_string();
    let err = |e: hound::Error| Error::Audio {
        item: item.clone(),
        detail: e.to_string(),
    };
    let mut reader = hound::WavReader::open(path).map_err(err)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Audio {
            item,
            detail: format!("expected mono audio, found {} channels", spec.channels),
        });
    }
    let samples = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(err)?,
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(err)?
        }
    };
    Ok(AudioClip::new(samples, spec.sample_rate))
}

/// Clip duration from the WAV header, without decoding samples.
pub fn wav_duration(path: &Path) -> Result<f64> {
    let reader = hound::WavReader::open(path).map_err(|e| Error::Audio {
        item: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let spec = reader.spec();
    Ok(reader.duration() as f64 / spec.sample_rate as f64)
}

/// Writes a mono 32-bit float WAV.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let err = |e: hound::Error| Error::Audio {
        item: path.display().to_string(),
        detail: e.to_string(),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(err)?;
    for &s in &clip.samples {
        w.write_sample(s as f32).map_err(err)?;
    }
    w.finalize().map_err(err)
}

/// Linear-interpolation resampling. Output length is
/// `round(n * target / source)`; output sample `j` reads source position
/// `j * source / target`, holding the last sample past the end.
pub fn resample(clip: &AudioClip, target_rate: u32) -> AudioClip {
    if clip.sample_rate == target_rate || clip.is_empty() {
        return AudioClip::new(clip.samples.clone(), target_rate);
    }
    let n = clip.samples.len();
    let (src, dst) = (clip.sample_rate as f64, target_rate as f64);
    let n_out = ((n as f64) * dst / src).round() as usize;
    let samples = (0..n_out)
        .map(|j| {
            let p = j as f64 * src / dst;
            let i = p.floor() as usize;
            if i + 1 >= n {
                return clip.samples[n - 1];
            }
            let f = p - i as f64;
            (1.0 - f) * clip.samples[i] + f * clip.samples[i + 1]
        })
        .collect();
    AudioClip::new(samples, target_rate)
}

/// Loads, resamples to 16 kHz and concatenates the sources in order, keeping
/// the first `max_seconds`. An empty list yields 100 ms of silence.
pub fn preprocess_audio(sources: &[AudioSource], max_seconds: f64) -> Result<AudioClip> {
    if sources.is_empty() {
        return Ok(AudioClip::silence(SILENCE_SECONDS, TARGET_SAMPLE_RATE));
    }
    let max_samples = (max_seconds * TARGET_SAMPLE_RATE as f64).round() as usize;
    let mut out = Vec::new();
    for (i, src) in sources.iter().enumerate() {
        let clip = match src {
            AudioSource::File(p) => load_wav(p)?,
            AudioSource::Clip(c) => c.clone(),
        };
        if clip.sample_rate == 0 {
            return Err(Error::Audio {
                item: src.describe(i),
                detail: "zero sample rate".into(),
            });
        }
        out.extend(resample(&clip, TARGET_SAMPLE_RATE).samples);
        if out.len() >= max_samples {
            break;
        }
    }
    out.truncate(max_samples);
    Ok(AudioClip::new(out, TARGET_SAMPLE_RATE))
}

/// Strided 1-D convolution over `x[T, c_in]` as windowing plus a matmul.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub kernel: usize,
    pub stride: usize,
    pub linear: Linear,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Conv1d {
            kernel,
            stride,
            linear: Linear::new(store, name, kernel * c_in, c_out, ParamGroup::Backbone, rng),
        }
    }

    /// Pre-activation output `[ceil(T / stride), c_out]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let cols = tape.im2col(x, self.kernel, self.stride)?;
        self.linear.forward(tape, store, cols)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AudioEncoderConfig {
    pub conv: Vec<ConvSpec>,
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_seconds: f64,
    /// Counted over conv layers then transformer blocks, from the top.
    pub trainable_layer_count: usize,
}

impl Default for AudioEncoderConfig {
    fn default() -> Self {
        AudioEncoderConfig {
            conv: vec![
                ConvSpec {
                    kernel: 16,
                    stride: 16,
                },
                ConvSpec {
                    kernel: 20,
                    stride: 20,
                },
            ],
            model_dim: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 256,
            max_seconds: DEFAULT_MAX_SECONDS,
            trainable_layer_count: 3,
        }
    }
}

impl AudioEncoderConfig {
    pub fn downsample_factor(&self) -> usize {
        self.conv.iter().map(|c| c.stride).product()
    }

    pub fn max_samples(&self) -> usize {
        (self.max_seconds * TARGET_SAMPLE_RATE as f64).round() as usize
    }

    /// Frames produced for `samples` input samples.
    pub fn frames_for(&self, samples: usize) -> usize {
        self.conv.iter().fold(samples, |t, c| t.div_ceil(c.stride))
    }

    pub fn layer_count(&self) -> usize {
        self.conv.len() + self.n_layers
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv.is_empty() || self.conv.iter().any(|c| c.kernel == 0 || c.stride == 0) {
            return Err(Error::contract(
                "audio encoder needs conv layers with positive kernel and stride",
            ));
        }
        if self.model_dim == 0 || self.n_heads == 0 || !self.model_dim.is_multiple_of(self.n_heads)
        {
            return Err(Error::contract(format!(
                "model_dim {} must be a positive multiple of n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.trainable_layer_count > self.layer_count() {
            return Err(Error::contract(format!(
                "trainable_layer_count {} exceeds {} audio layers",
                self.trainable_layer_count,
                self.layer_count()
            )));
        }
        if self.max_seconds < SILENCE_SECONDS || self.ffn_dim == 0 {
            return Err(Error::contract(
                "max_seconds must cover the silence clip and ffn_dim be positive",
            ));
        }
        Ok(())
    }
}

/// Conv downsampling stack with GELU, learned frame positions, transformer
/// blocks, final norm. Frames are never masked.
#[derive(Debug, Clone)]
pub struct AudioEncoder {
    pub config: AudioEncoderConfig,
    pub convs: Vec<Conv1d>,
    pub position_embedding: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: LayerNorm,
}

impl AudioEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: AudioEncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let convs = config
            .conv
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let c_in = if i == 0 { 1 } else { d };
                Conv1d::new(
                    store,
                    &format!("{name}.conv.{i}"),
                    c_in,
                    d,
                    c.kernel,
                    c.stride,
                    rng,
                )
            })
            .collect();
        let max_frames = config.frames_for(config.max_samples());
        let position_embedding = store.add(
            format!("{name}.position_embedding"),
            init_normal(&[max_frames, d], 0.1, rng),
            ParamGroup::Backbone,
        );
        let blocks = (0..config.n_layers)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("{name}.blocks.{i}"),
                    d,
                    config.n_heads,
                    config.ffn_dim,
                    rng,
                )
            })
            .collect();
        let final_norm = LayerNorm::new(
            store,
            &format!("{name}.final_norm"),
            d,
            ParamGroup::Backbone,
        );
        let enc = AudioEncoder {
            convs,
            position_embedding,
            blocks,
            final_norm,
            config: config.clone(),
        };
        enc.apply_trainable(store, config.trainable_layer_count)?;
        Ok(enc)
    }

    /// Bottom-up layer groups: each conv, then each block. Frame positions go
    /// with the first block and the final norm with the last.
    pub fn layer_groups(&self) -> Vec<Vec<ParamId>> {
        let mut groups: Vec<Vec<ParamId>> = self.convs.iter().map(|c| c.linear.params()).collect();
        let n_conv = groups.len();
        groups.extend(self.blocks.iter().map(TransformerBlock::params));
        let first_block = groups.get_mut(n_conv).unwrap_or_else(|| unreachable!());
        first_block.push(self.position_embedding);
        groups
            .last_mut()
            .expect("layers")
            .extend(self.final_norm.params());
        groups
    }

    fn apply_trainable(&self, store: &mut ParamStore, k: usize) -> Result<()> {
        let groups = self.layer_groups();
        let n = groups.len();
        if k > n {
            return Err(Error::contract(format!(
                "cannot unfreeze {k} of {n} audio layers"
            )));
        }
        for (i, g) in groups.iter().enumerate() {
            set_trainable(store, g, i >= n - k);
        }
        Ok(())
    }

    pub fn set_trainable_layers(&mut self, store: &mut ParamStore, k: usize) -> Result<()> {
        self.apply_trainable(store, k)?;
        self.config.trainable_layer_count = k;
        Ok(())
    }

    /// Output of the conv stack, `[frames, d]`.
    pub fn conv_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        clip: &AudioClip,
    ) -> Result<Var> {
        if clip.is_empty() {
            return Err(Error::contract("cannot encode an empty audio buffer"));
        }
        if clip.len() > self.config.max_samples() {
            return Err(Error::contract(format!(
                "clip of {} samples exceeds the {}-sample limit",
                clip.len(),
                self.config.max_samples()
            )));
        }
        let mut h = tape.constant(Tensor::new(vec![clip.len(), 1], clip.samples.clone())?);
        for conv in &self.convs {
            h = conv.forward(tape, store, h)?;
            h = tape.gelu(h);
        }
        Ok(h)
    }

    /// `[frames, d]` embeddings with `frames = ceil(samples / factor)`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, clip: &AudioClip) -> Result<Var> {
        let feats = self.conv_features(tape, store, clip)?;
        let (frames, _) = tape.value(feats).dims2()?;
        let table = tape.param(store, self.position_embedding);
        let positions: Vec<usize> = (0..frames).collect();
        let pos = tape.gather_rows(table, &positions)?;
        let mut h = tape.add(feats, pos)?;
        let keep = vec![true; frames];
        for block in &self.blocks {
            h = block.forward(tape, store, h, &keep)?;
        }
        self.final_norm.forward(tape, store, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layer_groups().into_iter().flatten().collect()
    }
}

/// Unweighted mean over frames, `[frames, d] -> [1, d]`.
pub fn temporal_avg(tape: &mut Tape, emb: Var) -> Result<Var> {
    let (frames, _) = tape.value(emb).dims2()?;
    if frames == 0 {
        return Err(Error::contract("temporal_avg over zero frames"));
    }
    weighted_row_sum(tape, emb, vec![1.0 / frames as f64; frames])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AudioArchitecture {
    /// Encoder, temporal average, head.
    HubertStyle,
    /// Shared encoder over clip and context clip; pooled halves concatenated.
    TemporalAvg,
}

impl AudioArchitecture {
    pub const ALL: [AudioArchitecture; 2] = [
        AudioArchitecture::HubertStyle,
        AudioArchitecture::TemporalAvg,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            AudioArchitecture::HubertStyle => "hubert",
            AudioArchitecture::TemporalAvg => "temporal-avg",
        }
    }

    pub fn table_label(self) -> &'static str {
        match self {
            AudioArchitecture::HubertStyle => "Hubert Base fine-tuned",
            AudioArchitecture::TemporalAvg => "TemporalAvg",
        }
    }
}

impl std::str::FromStr for AudioArchitecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.slug() == s)
            .ok_or_else(|| Error::Parse(format!("unknown audio architecture `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioModelConfig {
    pub encoder: AudioEncoderConfig,
    pub architecture: AudioArchitecture,
    pub head_hidden: Vec<usize>,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for AudioModelConfig {
    fn default() -> Self {
        AudioModelConfig {
            encoder: AudioEncoderConfig::default(),
            architecture: AudioArchitecture::HubertStyle,
            head_hidden: vec![50],
            dropout: 0.1,
            seed: 0,
        }
    }
}

/// A preprocessed clip and, for the context model, its preprocessed context.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioInput {
    pub clip: AudioClip,
    pub context: Option<AudioClip>,
}

#[derive(Debug, Clone)]
pub struct AudioModel {
    pub config: AudioModelConfig,
    pub store: ParamStore,
    pub encoder: AudioEncoder,
    pub head: Mlp,
}

impl AudioModel {
    pub fn new(config: AudioModelConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::contract(format!(
                "dropout {} outside [0, 1)",
                config.dropout
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = AudioEncoder::new(&mut store, "audio", config.encoder.clone(), &mut rng)?;
        let d = config.encoder.model_dim;
        let head_in = match config.architecture {
            AudioArchitecture::HubertStyle => d,
            AudioArchitecture::TemporalAvg => 2 * d,
        };
        let head = Mlp::new(
            &mut store,
            "head",
            head_in,
            &config.head_hidden,
            NUM_CLASSES,
            config.dropout,
            ParamGroup::Head,
            &mut rng,
        );
        Ok(AudioModel {
            config,
            store,
            encoder,
            head,
        })
    }

    pub fn set_trainable_layers(&mut self, k: usize) -> Result<()> {
        self.encoder.set_trainable_layers(&mut self.store, k)?;
        self.config.encoder.trainable_layer_count = k;
        Ok(())
    }

    /// Pooled representation fed to the head: `[1, d]` or `[1, 2d]`.
    pub fn pooled(&self, tape: &mut Tape, input: &AudioInput) -> Result<Var> {
        let emb = self.encoder.encode(tape, &self.store, &input.clip)?;
        let own = temporal_avg(tape, emb)?;
        match self.config.architecture {
            AudioArchitecture::HubertStyle => Ok(own),
            AudioArchitecture::TemporalAvg => {
                let silence;
                let ctx = match &input.context {
                    Some(c) if !c.is_empty() => c,
                    _ => {
                        silence = AudioClip::silence(SILENCE_SECONDS, TARGET_SAMPLE_RATE);
                        &silence
                    }
                };
                let ctx_emb = self.encoder.encode(tape, &self.store, ctx)?;
                let ctx_pooled = temporal_avg(tape, ctx_emb)?;
                tape.concat_cols(&[own, ctx_pooled])
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, input: &AudioInput, mode: &mut Mode) -> Result<Var> {
        let pooled = self.pooled(tape, input)?;
        self.head.forward(tape, &self.store, pooled, mode)
    }

    pub fn predict(&self, input: &AudioInput) -> Result<Logits> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, input, &mut Mode::Eval)?;
        Logits::from_slice(tape.value(out).data())
    }
}

/// Upper-inclusive duration buckets in seconds; the last is open-ended.
pub const LENGTH_BUCKETS: [(f64, f64); 6] = [
    (0.0, 1.0),
    (1.0, 3.0),
    (3.0, 5.0),
    (5.0, 10.0),
    (10.0, 15.0),
    (15.0, f64::INFINITY),
];

pub fn bucket_label(i: usize) -> String {
    let (lo, hi) = LENGTH_BUCKETS[i];
    if hi.is_infinite() {
        format!("{lo}+")
    } else {
        format!("{lo}-{hi}")
    }
}

/// Index of the bucket holding `seconds`: `[0, 1]`, then `(lo, hi]`.
pub fn bucket_of(seconds: f64) -> usize {
    LENGTH_BUCKETS
        .iter()
        .position(|&(_, hi)| seconds <= hi)
        .unwrap_or(LENGTH_BUCKETS.len() - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DurationRecord {
    pub debate_id: String,
    pub index: usize,
    pub label: FallacyClass,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassDuration {
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single clip.
    pub std: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthReport {
    pub histogram: [usize; 6],
    pub per_class: [ClassDuration; NUM_CLASSES],
    /// Mean total duration of the `N` preceding clips in the same debate, for
    /// `N = 1..=6`. Missing context counts as zero seconds.
    pub context_mean: [f64; 6],
}

pub fn length_statistics(records: &[DurationRecord]) -> LengthReport {
    let mut histogram = [0; 6];
    for r in records {
        histogram[bucket_of(r.seconds)] += 1;
    }
    let mut per_class = [ClassDuration::default(); NUM_CLASSES];
    for class in FallacyClass::ALL {
        let xs: Vec<f64> = records
            .iter()
            .filter(|r| r.label == class)
            .map(|r| r.seconds)
            .collect();
        if xs.is_empty() {
            continue;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        per_class[class.index()] = ClassDuration {
            count: xs.len(),
            mean,
            std,
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        };
    }
    let mut by_debate: std::collections::BTreeMap<&str, Vec<&DurationRecord>> = Default::default();
    for r in records {
        by_debate.entry(&r.debate_id).or_default().push(r);
    }
    for v in by_debate.values_mut() {
        v.sort_by_key(|r| r.index);
    }
    let mut context_mean = [0.0; 6];
    if !records.is_empty() {
        for (n, slot) in context_mean.iter_mut().enumerate() {
            let window = n + 1;
            let mut total = 0.0;
            for entries in by_debate.values() {
                for (pos, _) in entries.iter().enumerate() {
                    let start = pos.saturating_sub(window);
                    total += entries[start..pos].iter().map(|r| r.seconds).sum::<f64>();
                }
            }
            *slot = total / records.len() as f64;
        }
    }
    LengthReport {
        histogram,
        per_class,
        context_mean,
    }
}

impl LengthReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let total: usize = self.histogram.iter().sum();
        writeln!(s, "{:<12} {:>8} {:>8}", "Length (s)", "Count", "Share").unwrap();
        for (i, &c) in self.histogram.iter().enumerate() {
            let share = if total == 0 {
                0.0
            } else {
                c as f64 / total as f64
            };
            writeln!(
                s,
                "{:<12} {:>8} {:>7.2}%",
                bucket_label(i),
                c,
                100.0 * share
            )
            .unwrap();
        }
        writeln!(s).unwrap();
        writeln!(
            s,
            "{:<6} {:>6} {:>9} {:>9} {:>9}",
            "Class", "Count", "Mean (s)", "Std (s)", "Max (s)"
        )
        .unwrap();
        for class in FallacyClass::ALL {
            let d = self.per_class[class.index()];
            writeln!(
                s,
                "{:<6} {:>6} {:>9.2} {:>9.2} {:>9.2}",
                class.abbrev(),
                d.count,
                d.mean,
                d.std,
                d.max
            )
            .unwrap();
        }
        writeln!(s).unwrap();
        writeln!(s, "{:<8} {:>18}", "Context", "Avg duration (s)").unwrap();
        for (n, m) in self.context_mean.iter().enumerate() {
            writeln!(s, "{:<8} {:>18.2}", n + 1, m).unwrap();
        }
        s
    }
}
