//! Training configuration, learning-rate schedules, AdamW, early stopping
//! and the training loop.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::data::{compute_class_weights, stratified_split, Dataset};
use crate::audio::{
    preprocess_audio, AudioArchitecture, AudioEncoderConfig, AudioInput, AudioModel,
    AudioModelConfig,
};
use crate::encoder::{EncoderConfig, Vocab};
use crate::ensemble::{evaluate, EvalReport, LogitCache};
use crate::error::{Error, Result};
use crate::fusion::{Architecture, FusionConfig, TextInput, TextModel, TextModelConfig};
use crate::labels::{FallacyClass, Logits, NUM_CLASSES};
use crate::nn::Mode;
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{Tape, Var};

pub const MAX_CONTEXT_WINDOW: usize = 6;

/// Which classifier to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelChoice {
    Text(Architecture),
    Audio(AudioArchitecture),
}

impl ModelChoice {
    pub fn slug(self) -> &'static str {
        match self {
            ModelChoice::Text(a) => a.slug(),
            ModelChoice::Audio(a) => a.slug(),
        }
    }

    pub fn is_text(self) -> bool {
        matches!(self, ModelChoice::Text(_))
    }
}

impl fmt::Display for ModelChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for ModelChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.parse::<Architecture>()
            .map(ModelChoice::Text)
            .or_else(|_| s.parse::<AudioArchitecture>().map(ModelChoice::Audio))
            .map_err(|_| Error::Parse(format!("unknown model `{s}`")))
    }
}

impl Serialize for ModelChoice {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.slug())
    }
}

impl<'de> Deserialize<'de> for ModelChoice {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheduler {
    Linear,
    Cosine,
}

impl FromStr for Scheduler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Scheduler::Linear),
            "cosine" => Ok(Scheduler::Cosine),
            _ => Err(Error::Parse(format!("unknown scheduler `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassWeightMode {
    /// Inverse frequency over the training split.
    Dynamic,
    Uniform,
}

impl FromStr for ClassWeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(ClassWeightMode::Dynamic),
            "uniform" => Ok(ClassWeightMode::Uniform),
            _ => Err(Error::Parse(format!("unknown class weight mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextSettings {
    pub encoder: EncoderConfig,
    pub head_hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for TextSettings {
    fn default() -> Self {
        TextSettings {
            encoder: EncoderConfig::default(),
            head_hidden: vec![100, 50],
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AudioSettings {
    pub encoder: AudioEncoderConfig,
    pub head_hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for AudioSettings {
    fn default() -> Self {
        AudioSettings {
            encoder: AudioEncoderConfig::default(),
            head_hidden: vec![50],
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelChoice,
    pub context_window: usize,
    pub backbone_lr: f64,
    pub head_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub max_steps: usize,
    pub warmup_fraction: f64,
    pub scheduler: Scheduler,
    /// Consecutive non-improving validation rounds tolerated.
    pub patience: usize,
    pub seed: u64,
    pub class_weights: ClassWeightMode,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub text: TextSettings,
    pub audio: AudioSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelChoice::Text(Architecture::ContextPool),
            context_window: 1,
            backbone_lr: 3.4e-5,
            head_lr: 3.4e-5,
            weight_decay: 8.05e-5,
            batch_size: 8,
            grad_accum: 3,
            max_steps: 860,
            warmup_fraction: 0.3,
            scheduler: Scheduler::Linear,
            patience: 5,
            seed: 20,
            class_weights: ClassWeightMode::Dynamic,
            train_fraction: 0.8,
            split_seed: 20,
            text: TextSettings::default(),
            audio: AudioSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::contract(format!(
                "warmup fraction {} outside [0, 1)",
                self.warmup_fraction
            )));
        }
        if self.patience == 0 {
            return Err(Error::contract("patience must be at least 1"));
        }
        if self.context_window > MAX_CONTEXT_WINDOW {
            return Err(Error::contract(format!(
                "context window {} outside 0..={MAX_CONTEXT_WINDOW}",
                self.context_window
            )));
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.max_steps == 0 {
            return Err(Error::contract(
                "batch size, accumulation and max steps must be positive",
            ));
        }
        let rates = [self.backbone_lr, self.head_lr, self.weight_decay];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::contract(
                "learning rates and weight decay must be nonnegative",
            ));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.max_steps as f64).round() as usize
    }
}

/// Learning rate at optimizer step `step` (0-based): linear ramp from 0 to
/// `peak` over the warmup steps, then linear or half-cosine decay reaching 0
/// at `max_steps`.
pub fn lr_at_step(
    step: usize,
    max_steps: usize,
    warmup_fraction: f64,
    peak: f64,
    scheduler: Scheduler,
) -> f64 {
    if step >= max_steps {
        return 0.0;
    }
    let warmup = (warmup_fraction * max_steps as f64).round() as usize;
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (max_steps - warmup) as f64;
    match scheduler {
        Scheduler::Linear => peak * (1.0 - progress),
        Scheduler::Cosine => peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
    }
}

/// Decoupled-weight-decay Adam. Frozen parameters are never touched.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| vec![0.0; p.value.len()])
            .collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        backbone_lr: f64,
        head_lr: f64,
        weight_decay: f64,
    ) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let lr = match p.group {
                ParamGroup::Backbone => backbone_lr,
                ParamGroup::Head => head_lr,
            };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let grad = &p.grad;
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps) + weight_decay * *w;
                *w -= lr * update;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the lowest validation loss; stops after `patience` consecutive
/// rounds without strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_round: Option<usize>,
    pub bad_rounds: usize,
    pub rounds: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_round: None,
            bad_rounds: 0,
            rounds: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> StopDecision {
        let round = self.rounds;
        self.rounds += 1;
        if loss < self.best {
            self.best = loss;
            self.best_round = Some(round);
            self.bad_rounds = 0;
            return StopDecision::Improved;
        }
        self.bad_rounds += 1;
        if self.bad_rounds >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

/// A model the training loop can drive.
pub trait Classifier {
    type Input;

    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Logits `[1, 6]` for one input.
    fn logits(&self, tape: &mut Tape, input: &Self::Input, mode: &mut Mode) -> Result<Var>;

    fn predict_logits(&self, input: &Self::Input) -> Result<Logits> {
        let mut tape = Tape::new();
        let out = self.logits(&mut tape, input, &mut Mode::Eval)?;
        Logits::from_slice(tape.value(out).data())
    }
}

impl Classifier for TextModel {
    type Input = TextInput;

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn logits(&self, tape: &mut Tape, input: &TextInput, mode: &mut Mode) -> Result<Var> {
        self.forward(tape, input, mode)
    }
}

impl Classifier for AudioModel {
    type Input = AudioInput;

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn logits(&self, tape: &mut Tape, input: &AudioInput, mode: &mut Mode) -> Result<Var> {
        self.forward(tape, input, mode)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example<I> {
    pub id: String,
    pub input: I,
    pub label: FallacyClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    /// Number of optimizer steps completed.
    pub step: usize,
    pub loss: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<StepRecord>,
    pub validations: Vec<ValidationRecord>,
    pub best_validation: usize,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn best(&self) -> ValidationRecord {
        self.validations[self.best_validation]
    }

    /// Tab-separated history: `step loss lr_backbone lr_head grad_norm`.
    pub fn write_history(&self, mut w: impl Write) -> Result<()> {
        let mut s = String::from("step\tloss\tlr_backbone\tlr_head\tgrad_norm\n");
        for r in &self.history {
            s.push_str(&format!(
                "{}\t{:?}\t{:?}\t{:?}\t{:?}\n",
                r.step, r.loss, r.lr_backbone, r.lr_head, r.grad_norm
            ));
        }
        w.write_all(s.as_bytes())
            .map_err(|e| Error::io("<history>", e))
    }
}

/// Class-weighted mean loss and predictions over a labelled set.
pub fn evaluate_examples<M: Classifier>(
    model: &M,
    examples: &[Example<M::Input>],
    class_weights: &[f64; NUM_CLASSES],
) -> Result<(f64, Vec<Logits>)> {
    let mut total = 0.0;
    let mut weight = 0.0;
    let mut logits = Vec::with_capacity(examples.len());
    let mut tape = Tape::new();
    for ex in examples {
        tape.reset();
        let out = model.logits(&mut tape, &ex.input, &mut Mode::Eval)?;
        let w = class_weights[ex.label.index()];
        let loss = tape.weighted_cross_entropy(out, &[ex.label.index()], &[w])?;
        total += tape.value(loss).data()[0];
        weight += w;
        logits.push(Logits::from_slice(tape.value(out).data())?);
    }
    Ok((total / weight, logits))
}

/// Runs the optimizer loop with validation every
/// `ceil(|train| / (batch * accum))` steps and at the last step, then
/// restores the parameters with the lowest validation loss.
pub fn fit<M: Classifier>(
    model: &mut M,
    train: &[Example<M::Input>],
    val: &[Example<M::Input>],
    cfg: &TrainConfig,
    class_weights: &[f64; NUM_CLASSES],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::contract(
            "training and validation sets must be non-empty",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let cadence = train.len().div_ceil(cfg.batch_size * cfg.grad_accum).max(1);
    let mut adam = AdamW::new(model.store());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_snapshot = model.store().snapshot();
    let mut history = Vec::new();
    let mut validations = Vec::new();
    let mut best_validation = 0;
    let mut stopped_early = false;
    let mut tape = Tape::new();

    for step in 0..cfg.max_steps {
        model.store_mut().zero_grad();
        let mut step_loss = 0.0;
        for _ in 0..cfg.grad_accum {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }
            let wsum: f64 = batch
                .iter()
                .map(|&i| class_weights[train[i].label.index()])
                .sum();
            let scale = 1.0 / (wsum * cfg.grad_accum as f64);
            for &i in &batch {
                let ex = &train[i];
                tape.reset();
                let out = model.logits(&mut tape, &ex.input, &mut Mode::Train(&mut rng))?;
                let w = class_weights[ex.label.index()] * scale;
                let loss = tape.weighted_cross_entropy(out, &[ex.label.index()], &[w])?;
                step_loss += tape.value(loss).data()[0];
                let grads = tape.backward(loss)?;
                model.store_mut().accumulate(&grads, 1.0);
            }
        }
        if !step_loss.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: step_loss,
            });
        }
        let grad_norm = model.store().grad_norm();
        let lr_backbone = lr_at_step(
            step,
            cfg.max_steps,
            cfg.warmup_fraction,
            cfg.backbone_lr,
            cfg.scheduler,
        );
        let lr_head = lr_at_step(
            step,
            cfg.max_steps,
            cfg.warmup_fraction,
            cfg.head_lr,
            cfg.scheduler,
        );
        adam.step(model.store_mut(), lr_backbone, lr_head, cfg.weight_decay);
        history.push(StepRecord {
            step,
            loss: step_loss,
            lr_backbone,
            lr_head,
            grad_norm,
        });
        let done = step + 1;
        if done % cadence == 0 || done == cfg.max_steps {
            let (loss, logits) = evaluate_examples(model, val, class_weights)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            let preds: Vec<FallacyClass> = logits.iter().map(Logits::argmax).collect();
            let golds: Vec<FallacyClass> = val.iter().map(|e| e.label).collect();
            let macro_f1 = evaluate(&preds, &golds)?.macro_f1;
            validations.push(ValidationRecord {
                step: done,
                loss,
                macro_f1,
            });
            match stopper.observe(loss) {
                StopDecision::Improved => {
                    best_snapshot = model.store().snapshot();
                    best_validation = validations.len() - 1;
                }
                StopDecision::Continue => {}
                StopDecision::Stop => {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    model.store_mut().restore(&best_snapshot);
    Ok(TrainOutcome {
        history,
        validations,
        best_validation,
        stopped_early,
    })
}

/// A trained text or audio classifier.
#[derive(Debug, Clone)]
pub enum TrainedModel {
    Text(TextModel),
    Audio(AudioModel),
}

impl TrainedModel {
    pub fn store(&self) -> &ParamStore {
        match self {
            TrainedModel::Text(m) => &m.store,
            TrainedModel::Audio(m) => &m.store,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    config: TrainConfig,
    #[serde(default)]
    vocab: Option<Vocab>,
}

pub const CHECKPOINT_KIND: &str = "ctxfusion-classifier";

/// Builds an untrained model from a config; text models need a vocabulary.
pub fn build_model(cfg: &TrainConfig, vocab: Option<Vocab>) -> Result<TrainedModel> {
    match cfg.model {
        ModelChoice::Text(arch) => {
            let vocab = vocab.ok_or_else(|| Error::contract("text models need a vocabulary"))?;
            let model = TextModel::new(
                TextModelConfig {
                    encoder: cfg.text.encoder.clone(),
                    fusion: FusionConfig {
                        architecture: arch,
                        head_hidden: cfg.text.head_hidden.clone(),
                        dropout: cfg.text.dropout,
                    },
                    seed: cfg.seed,
                },
                vocab,
            )?;
            Ok(TrainedModel::Text(model))
        }
        ModelChoice::Audio(arch) => Ok(TrainedModel::Audio(AudioModel::new(AudioModelConfig {
            encoder: cfg.audio.encoder.clone(),
            architecture: arch,
            head_hidden: cfg.audio.head_hidden.clone(),
            dropout: cfg.audio.dropout,
            seed: cfg.seed,
        })?)),
    }
}

/// Writes parameters plus the config (and vocabulary) needed to rebuild the model.
pub fn save_checkpoint(path: &Path, model: &TrainedModel, cfg: &TrainConfig) -> Result<()> {
    let meta = CheckpointMeta {
        format: CHECKPOINT_KIND.into(),
        config: cfg.clone(),
        vocab: match model {
            TrainedModel::Text(m) => Some(m.vocab.clone()),
            TrainedModel::Audio(_) => None,
        },
    };
    let json = serde_json::to_string(&meta).map_err(|e| Error::Parse(e.to_string()))?;
    model.store().save(path, &json)
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainedModel, TrainConfig)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (meta, _) = crate::params::parse_checkpoint(&bytes)?;
    let meta: CheckpointMeta = serde_json::from_str(&meta)
        .map_err(|e| Error::Parse(format!("checkpoint metadata: {e}")))?;
    if meta.format != CHECKPOINT_KIND {
        return Err(Error::Parse(format!(
            "unexpected checkpoint kind `{}`",
            meta.format
        )));
    }
    let vocab = meta.vocab.map(|mut v| {
        v.reindex();
        v
    });
    let mut model = build_model(&meta.config, vocab)?;
    match &mut model {
        TrainedModel::Text(m) => m.store.read_checkpoint(bytes.as_slice())?,
        TrainedModel::Audio(m) => m.store.read_checkpoint(bytes.as_slice())?,
    };
    Ok((model, meta.config))
}

pub fn text_examples(
    model: &TextModel,
    dataset: &Dataset,
    positions: &[usize],
    n: usize,
) -> Result<Vec<Example<TextInput>>> {
    positions
        .iter()
        .map(|&p| {
            let e = &dataset.entries()[p];
            Ok(Example {
                id: e.id(),
                input: model.prepare(&e.text, &dataset.context_window(p, n))?,
                label: e.label,
            })
        })
        .collect()
}

pub fn audio_examples(
    model: &AudioModel,
    dataset: &Dataset,
    positions: &[usize],
    n: usize,
) -> Result<Vec<Example<AudioInput>>> {
    let max_seconds = model.config.encoder.max_seconds;
    let with_context = model.config.architecture == AudioArchitecture::TemporalAvg;
    positions
        .iter()
        .map(|&p| {
            let e = &dataset.entries()[p];
            let clip = preprocess_audio(&dataset.audio_sources(p), max_seconds)?;
            let context = if with_context {
                Some(preprocess_audio(
                    &dataset.context_audio_sources(p, n),
                    max_seconds,
                )?)
            } else {
                None
            };
            Ok(Example {
                id: e.id(),
                input: AudioInput { clip, context },
                label: e.label,
            })
        })
        .collect()
}

/// Everything produced by one training run on a dataset.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: TrainedModel,
    pub outcome: TrainOutcome,
    pub report: EvalReport,
    pub val_logits: LogitCache,
    pub train_positions: Vec<usize>,
    pub val_positions: Vec<usize>,
}

fn class_weights_for(cfg: &TrainConfig, labels: &[FallacyClass]) -> Result<[f64; NUM_CLASSES]> {
    match cfg.class_weights {
        ClassWeightMode::Dynamic => compute_class_weights(labels),
        ClassWeightMode::Uniform => Ok([1.0; NUM_CLASSES]),
    }
}

fn run_fit<M: Classifier>(
    model: &mut M,
    train: &[Example<M::Input>],
    val: &[Example<M::Input>],
    cfg: &TrainConfig,
    weights: &[f64; NUM_CLASSES],
    model_id: &str,
) -> Result<(TrainOutcome, EvalReport, LogitCache)> {
    let outcome = fit(model, train, val, cfg, weights)?;
    let (_, logits) = evaluate_examples(model, val, weights)?;
    let preds: Vec<FallacyClass> = logits.iter().map(Logits::argmax).collect();
    let golds: Vec<FallacyClass> = val.iter().map(|e| e.label).collect();
    let report = evaluate(&preds, &golds)?;
    let mut cache = LogitCache::default();
    for (ex, l) in val.iter().zip(logits) {
        cache.push(ex.id.clone(), model_id, l);
    }
    Ok((outcome, report, cache))
}

/// Splits the dataset, trains the configured model and scores it on the
/// validation split. The text vocabulary is built from training sentences.
pub fn train_on_dataset(dataset: &Dataset, cfg: &TrainConfig, model_id: &str) -> Result<TrainRun> {
    cfg.validate()?;
    let labels = dataset.labels();
    let (train_pos, val_pos) = stratified_split(&labels, cfg.train_fraction, cfg.split_seed)?;
    let train_labels: Vec<FallacyClass> = train_pos.iter().map(|&p| labels[p]).collect();
    let weights = class_weights_for(cfg, &train_labels)?;
    let n = cfg.context_window;
    let vocab = cfg.model.is_text().then(|| {
        Vocab::build(
            train_pos
                .iter()
                .map(|&p| dataset.entries()[p].text.as_str()),
        )
    });
    let (model, outcome, report, val_logits) = match build_model(cfg, vocab)? {
        TrainedModel::Text(mut m) => {
            let train = text_examples(&m, dataset, &train_pos, n)?;
            let val = text_examples(&m, dataset, &val_pos, n)?;
            let (o, r, c) = run_fit(&mut m, &train, &val, cfg, &weights, model_id)?;
            (TrainedModel::Text(m), o, r, c)
        }
        TrainedModel::Audio(mut m) => {
            let train = audio_examples(&m, dataset, &train_pos, n)?;
            let val = audio_examples(&m, dataset, &val_pos, n)?;
            let (o, r, c) = run_fit(&mut m, &train, &val, cfg, &weights, model_id)?;
            (TrainedModel::Audio(m), o, r, c)
        }
    };
    Ok(TrainRun {
        model,
        outcome,
        report,
        val_logits,
        train_positions: train_pos,
        val_positions: val_pos,
    })
}

/// Logits for the given dataset positions, using each entry's context.
pub fn predict_positions(
    model: &TrainedModel,
    cfg: &TrainConfig,
    dataset: &Dataset,
    positions: &[usize],
) -> Result<Vec<Logits>> {
    let n = cfg.context_window;
    match model {
        TrainedModel::Text(m) => text_examples(m, dataset, positions, n)?
            .iter()
            .map(|e| m.predict_logits(&e.input))
            .collect(),
        TrainedModel::Audio(m) => audio_examples(m, dataset, positions, n)?
            .iter()
            .map(|e| m.predict_logits(&e.input))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_boundaries() {
        let peak = 3.4e-5;
        assert_eq!(lr_at_step(0, 860, 0.3, peak, Scheduler::Linear), 0.0);
        assert_eq!(lr_at_step(258, 860, 0.3, peak, Scheduler::Linear), peak);
        assert_eq!(lr_at_step(860, 860, 0.3, peak, Scheduler::Linear), 0.0);
        assert_eq!(lr_at_step(65, 100, 0.3, 1.0, Scheduler::Linear), 0.5);
        assert_eq!(lr_at_step(30, 100, 0.3, 1.0, Scheduler::Cosine), 1.0);
        assert!((lr_at_step(65, 100, 0.3, 1.0, Scheduler::Cosine) - 0.5).abs() < 1e-15);
        assert_eq!(lr_at_step(0, 10, 0.0, 2.0, Scheduler::Linear), 2.0);
    }

    #[test]
    fn early_stopping_counts_rounds_after_best() {
        let mut s = EarlyStopping::new(5);
        assert_eq!(s.observe(1.0), StopDecision::Improved);
        for _ in 0..4 {
            assert_eq!(s.observe(1.5), StopDecision::Continue);
        }
        assert_eq!(s.observe(2.0), StopDecision::Stop);
        assert_eq!(s.best_round, Some(0));
    }

    #[test]
    fn config_toml_round_trip_and_validation() {
        let cfg = TrainConfig::default();
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let partial = TrainConfig::from_toml(
            "model = \"cross-attn-gate\"\ncontext_window = 3\n[text.encoder]\nmodel_dim = 16\n",
        )
        .unwrap();
        assert_eq!(
            partial.model,
            ModelChoice::Text(Architecture::CrossAttnGate)
        );
        assert_eq!(partial.text.encoder.model_dim, 16);
        assert_eq!(partial.text.encoder.n_layers, 4);
        assert!(TrainConfig::from_toml("context_window = 7").is_err());
        assert!(TrainConfig::from_toml("warmup_fraction = 1.0").is_err());
        assert!(TrainConfig::from_toml("patience = 0").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert!(TrainConfig::from_toml("head_lr = nan").is_err());
        assert_eq!(
            "hubert".parse::<ModelChoice>().unwrap(),
            ModelChoice::Audio(AudioArchitecture::HubertStyle)
        );
    }
}
