//! Context integration architectures for the text modality.
//!
//! All variants share one [`TextEncoder`] between the sentence and its
//! context:
//!
//! * `Concat` encodes `[START] text [SEP] ctx_1 [SEP] ... ctx_N [END]` once
//!   and mean-pools it.
//! * `ContextPool` encodes text and joined context separately, mean-pools
//!   both and classifies their concatenation.
//! * `CrossAttn*` lets text tokens attend to context tokens, fuses the result
//!   back into the text embeddings (plain residual or sigmoid gate, then layer
//!   norm) and pools with either a masked mean or learned attentive weights.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{tokenize, EncoderConfig, TextEncoder, TokenSequence, Vocab, SEP_ID};
use crate::error::{Error, Result};
use crate::labels::{Logits, NUM_CLASSES};
use crate::nn::{weighted_row_sum, LayerNorm, Mlp, Mode, MultiHeadAttention};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// The `size` sentences immediately preceding an input, oldest first.
/// Near the start of a debate there may be fewer than `size`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContextWindow {
    pub size: usize,
    pub sentences: Vec<String>,
}

impl ContextWindow {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(size: usize, sentences: Vec<String>) -> Result<Self> {
        if sentences.len() > size {
            return Err(Error::contract(format!(
                "context window of size {size} given {} sentences",
                sentences.len()
            )));
        }
        Ok(ContextWindow { size, sentences })
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Concat,
    ContextPool,
    CrossAttnVanilla,
    CrossAttnGate,
    CrossAttnAttnPool,
    CrossAttnGateAttnPool,
}

impl Architecture {
    pub const ALL: [Architecture; 6] = [
        Architecture::Concat,
        Architecture::ContextPool,
        Architecture::CrossAttnVanilla,
        Architecture::CrossAttnGate,
        Architecture::CrossAttnAttnPool,
        Architecture::CrossAttnGateAttnPool,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            Architecture::Concat => "concat",
            Architecture::ContextPool => "context-pool",
            Architecture::CrossAttnVanilla => "cross-attn",
            Architecture::CrossAttnGate => "cross-attn-gate",
            Architecture::CrossAttnAttnPool => "cross-attn-attn-pool",
            Architecture::CrossAttnGateAttnPool => "cross-attn-gate-attn-pool",
        }
    }

    /// Row label in ablation tables.
    pub fn table_label(self) -> &'static str {
        match self {
            Architecture::Concat => "Concat",
            Architecture::ContextPool => "ContextPool",
            Architecture::CrossAttnVanilla => "CrossAttn",
            Architecture::CrossAttnGate => "w/ Gate",
            Architecture::CrossAttnAttnPool => "w/ Attentive Pooling",
            Architecture::CrossAttnGateAttnPool => "w/ Gate & Attentive Pool",
        }
    }

    pub fn is_cross_attn(self) -> bool {
        !matches!(self, Architecture::Concat | Architecture::ContextPool)
    }

    pub fn uses_gate(self) -> bool {
        matches!(
            self,
            Architecture::CrossAttnGate | Architecture::CrossAttnGateAttnPool
        )
    }

    pub fn uses_attentive_pool(self) -> bool {
        matches!(
            self,
            Architecture::CrossAttnAttnPool | Architecture::CrossAttnGateAttnPool
        )
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.slug() == s)
            .ok_or_else(|| Error::Parse(format!("unknown architecture `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub architecture: Architecture,
    pub head_hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            architecture: Architecture::ContextPool,
            head_hidden: vec![100, 50],
            dropout: 0.1,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Keeps the last `budget` tokens of `[SEP] c_1 [SEP] c_2 ... [SEP] c_N`
/// (oldest context dropped first), without a doubled separator at the cut.
fn context_tail(vocab: &Vocab, ctx: &ContextWindow, budget: usize) -> Vec<usize> {
    let mut all = Vec::new();
    for s in &ctx.sentences {
        all.push(SEP_ID);
        all.extend(vocab.word_ids(s));
    }
    if budget == 0 || all.is_empty() {
        return Vec::new();
    }
    if all.len() <= budget {
        return all;
    }
    let mut tail: Vec<usize> = all[all.len() - (budget - 1)..].to_vec();
    while tail.first() == Some(&SEP_ID) {
        tail.remove(0);
    }
    if tail.is_empty() {
        return Vec::new();
    }
    let mut out = vec![SEP_ID];
    out.extend(tail);
    out
}

/// `[START] text [SEP] ctx_1 ... [SEP] ctx_N [END]` padded to `max_len`.
/// Truncation never removes text tokens while context tokens remain; when the
/// text alone overflows it is cut from the end and no context is added.
pub fn assemble_concat(
    vocab: &Vocab,
    text: &str,
    ctx: &ContextWindow,
    max_len: usize,
) -> Result<TokenSequence> {
    if max_len < 3 {
        return Err(Error::contract(format!(
            "max_len must be at least 3, got {max_len}"
        )));
    }
    let mut body = vocab.word_ids(text);
    body.truncate(max_len - 2);
    let budget = max_len - 2 - body.len();
    body.extend(context_tail(vocab, ctx, budget));
    Ok(TokenSequence::framed(body, max_len))
}

/// The context sentences joined by separators, `[START] c_1 [SEP] ... c_N [END]`,
/// dropping the oldest tokens first. `None` when the window is empty.
pub fn join_context(
    vocab: &Vocab,
    ctx: &ContextWindow,
    max_len: usize,
) -> Result<Option<TokenSequence>> {
    if max_len < 3 {
        return Err(Error::contract(format!(
            "max_len must be at least 3, got {max_len}"
        )));
    }
    if ctx.is_empty() {
        return Ok(None);
    }
    let mut body = context_tail(vocab, ctx, max_len - 1);
    // Drop the leading separator; START marks the beginning instead.
    if body.first() == Some(&SEP_ID) {
        body.remove(0);
    }
    body.truncate(max_len - 2);
    Ok(Some(TokenSequence::framed(body, max_len)))
}

fn check_mask(tape: &Tape, emb: Var, mask: &[bool], op: &'static str) -> Result<usize> {
    let (rows, _) = tape.value(emb).dims2()?;
    if mask.len() != rows {
        return Err(Error::Dimension {
            op,
            detail: format!("mask of {} positions for {rows} rows", mask.len()),
        });
    }
    let kept = mask.iter().filter(|&&m| m).count();
    if kept == 0 {
        return Err(Error::contract(format!("{op}: every position is masked")));
    }
    Ok(kept)
}

/// Mean of the rows of `emb[seq, d]` whose mask is set, as `[1, d]`.
pub fn masked_mean_pool(tape: &mut Tape, emb: Var, mask: &[bool]) -> Result<Var> {
    let kept = check_mask(tape, emb, mask, "masked_mean_pool")?;
    let w = 1.0 / kept as f64;
    weighted_row_sum(
        tape,
        emb,
        mask.iter().map(|&m| if m { w } else { 0.0 }).collect(),
    )
}

/// Attention from text tokens to unmasked context tokens. With no unmasked
/// context the result is all zeros.
pub fn cross_attend(
    tape: &mut Tape,
    store: &ParamStore,
    attn: &MultiHeadAttention,
    text_emb: Var,
    ctx_emb: Var,
    ctx_mask: &[bool],
) -> Result<Var> {
    let (s_t, d) = tape.value(text_emb).dims2()?;
    let (_, d_c) = tape.value(ctx_emb).dims2()?;
    if d != d_c {
        return Err(Error::ShapeMismatch {
            op: "cross_attend",
            left: tape.value(text_emb).shape().to_vec(),
            right: tape.value(ctx_emb).shape().to_vec(),
        });
    }
    if !ctx_mask.iter().any(|&m| m) {
        return Ok(tape.constant(Tensor::zeros(&[s_t, d])));
    }
    attn.forward(tape, store, text_emb, ctx_emb, ctx_mask)
}

/// Sigmoid gate over `[text ‖ context-aware]`: one hidden layer of width d.
#[derive(Debug, Clone)]
pub struct FusionGate {
    pub mlp: Mlp,
}

impl FusionGate {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        FusionGate {
            mlp: Mlp::new(store, name, 2 * d, &[d], d, 0.0, ParamGroup::Head, rng),
        }
    }

    /// Gate activations in (0, 1), shape `[s_t, d]`.
    pub fn gate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        text_emb: Var,
        ctx_aware: Var,
    ) -> Result<Var> {
        let joint = tape.concat_cols(&[text_emb, ctx_aware])?;
        let logits = self.mlp.forward(tape, store, joint, &mut Mode::Eval)?;
        Ok(tape.sigmoid(logits))
    }
}

/// `layer_norm(text + g ⊙ ctx_aware)`; returns the fused embeddings and the gate.
pub fn gate_fuse(
    tape: &mut Tape,
    store: &ParamStore,
    gate: &FusionGate,
    norm: &LayerNorm,
    text_emb: Var,
    ctx_aware: Var,
) -> Result<(Var, Var)> {
    if tape.value(text_emb).shape() != tape.value(ctx_aware).shape() {
        return Err(Error::ShapeMismatch {
            op: "gate_fuse",
            left: tape.value(text_emb).shape().to_vec(),
            right: tape.value(ctx_aware).shape().to_vec(),
        });
    }
    let g = gate.gate(tape, store, text_emb, ctx_aware)?;
    let contribution = tape.mul(g, ctx_aware)?;
    let sum = tape.add(text_emb, contribution)?;
    Ok((norm.forward(tape, store, sum)?, g))
}

/// Ungated residual fusion: `layer_norm(text + ctx_aware)`.
pub fn residual_fuse(
    tape: &mut Tape,
    store: &ParamStore,
    norm: &LayerNorm,
    text_emb: Var,
    ctx_aware: Var,
) -> Result<Var> {
    let sum = tape.add(text_emb, ctx_aware)?;
    norm.forward(tape, store, sum)
}

/// Token scorer for attentive pooling: `d -> d -> 1` MLP.
#[derive(Debug, Clone)]
pub struct AttentivePooler {
    pub scorer: Mlp,
}

impl AttentivePooler {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        AttentivePooler {
            scorer: Mlp::new(store, name, d, &[d], 1, 0.0, ParamGroup::Head, rng),
        }
    }
}

/// Softmax-weighted sum of unmasked rows using learned per-token scores.
/// Returns the `[1, d]` pooled vector and the `[seq, 1]` weights.
pub fn attentive_pool(
    tape: &mut Tape,
    store: &ParamStore,
    pooler: &AttentivePooler,
    emb: Var,
    mask: &[bool],
) -> Result<(Var, Var)> {
    check_mask(tape, emb, mask, "attentive_pool")?;
    let scores = pooler.scorer.forward(tape, store, emb, &mut Mode::Eval)?;
    let weights = tape.masked_softmax(scores, 0, Some(mask))?;
    let wt = tape.transpose(weights)?;
    Ok((tape.matmul(wt, emb)?, weights))
}

/// Classification head: raw logits `[1, 6]`.
pub fn classify_head(
    tape: &mut Tape,
    store: &ParamStore,
    head: &Mlp,
    vec: Var,
    mode: &mut Mode,
) -> Result<Var> {
    let (rows, _) = tape.value(vec).dims2()?;
    if rows != 1 {
        return Err(Error::contract(format!(
            "classification head expects one row, got {rows}"
        )));
    }
    head.forward(tape, store, vec, mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct CrossAttnLayers {
    pub attn: MultiHeadAttention,
    pub gate: Option<FusionGate>,
    pub fuse_norm: LayerNorm,
    pub pooler: Option<AttentivePooler>,
}

/// Token sequences one entry needs under every architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct TextInput {
    pub text: TokenSequence,
    pub concat: TokenSequence,
    pub context: Option<TokenSequence>,
    pub empty_context: TokenSequence,
}

/// Intermediate values of one forward pass, for inspection in tests.
#[derive(Debug, Clone, Copy)]
pub struct TextTrace {
    pub logits: Var,
    pub pooled: Var,
    pub gate: Option<Var>,
    pub pool_weights: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct TextModel {
    pub config: TextModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub encoder: TextEncoder,
    pub cross: Option<CrossAttnLayers>,
    pub head: Mlp,
}

impl TextModel {
    pub fn new(mut config: TextModelConfig, vocab: Vocab) -> Result<Self> {
        config.encoder.vocab_size = vocab.len();
        config.fusion.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = TextEncoder::new(&mut store, "encoder", config.encoder.clone(), &mut rng)?;
        let d = config.encoder.model_dim;
        let arch = config.fusion.architecture;
        let cross = arch.is_cross_attn().then(|| CrossAttnLayers {
            attn: MultiHeadAttention::new(
                &mut store,
                "fusion.cross_attn",
                d,
                config.encoder.n_heads,
                ParamGroup::Head,
                &mut rng,
            ),
            gate: arch
                .uses_gate()
                .then(|| FusionGate::new(&mut store, "fusion.gate", d, &mut rng)),
            fuse_norm: LayerNorm::new(&mut store, "fusion.norm", d, ParamGroup::Head),
            pooler: arch
                .uses_attentive_pool()
                .then(|| AttentivePooler::new(&mut store, "fusion.pool", d, &mut rng)),
        });
        let head_in = if arch == Architecture::ContextPool {
            2 * d
        } else {
            d
        };
        let head = Mlp::new(
            &mut store,
            "head",
            head_in,
            &config.fusion.head_hidden,
            NUM_CLASSES,
            config.fusion.dropout,
            ParamGroup::Head,
            &mut rng,
        );
        Ok(TextModel {
            config,
            vocab,
            store,
            encoder,
            cross,
            head,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.config.fusion.architecture
    }

    pub fn set_trainable_layers(&mut self, k: usize) -> Result<()> {
        self.encoder.set_trainable_layers(&mut self.store, k)?;
        self.config.encoder.trainable_layer_count = k;
        Ok(())
    }

    pub fn prepare(&self, text: &str, ctx: &ContextWindow) -> Result<TextInput> {
        let max_len = self.config.encoder.max_seq_len;
        Ok(TextInput {
            text: tokenize(&self.vocab, text, max_len)?,
            concat: assemble_concat(&self.vocab, text, ctx, max_len)?,
            context: join_context(&self.vocab, ctx, max_len)?,
            empty_context: tokenize(&self.vocab, "", max_len)?,
        })
    }

    fn encode_pooled(&self, tape: &mut Tape, seq: &TokenSequence) -> Result<Var> {
        let seq = seq.unpadded();
        let emb = self.encoder.encode(tape, &self.store, &seq)?;
        masked_mean_pool(tape, emb, &seq.mask)
    }

    pub fn trace(&self, tape: &mut Tape, input: &TextInput, mode: &mut Mode) -> Result<TextTrace> {
        let store = &self.store;
        let mut gate = None;
        let mut pool_weights = None;
        let pooled = match self.architecture() {
            Architecture::Concat => self.encode_pooled(tape, &input.concat)?,
            Architecture::ContextPool => {
                let t = self.encode_pooled(tape, &input.text)?;
                let c = self
                    .encode_pooled(tape, input.context.as_ref().unwrap_or(&input.empty_context))?;
                tape.concat_cols(&[t, c])?
            }
            _ => {
                let layers = self.cross.as_ref().expect("cross-attention layers");
                let text = input.text.unpadded();
                let text_emb = self.encoder.encode(tape, store, &text)?;
                let ctx_aware = match &input.context {
                    Some(ctx) => {
                        let ctx = ctx.unpadded();
                        let ctx_emb = self.encoder.encode(tape, store, &ctx)?;
                        cross_attend(tape, store, &layers.attn, text_emb, ctx_emb, &ctx.mask)?
                    }
                    None => {
                        let (s_t, d) = tape.value(text_emb).dims2()?;
                        tape.constant(Tensor::zeros(&[s_t, d]))
                    }
                };
                let fused = match &layers.gate {
                    Some(g) => {
                        let (f, gv) =
                            gate_fuse(tape, store, g, &layers.fuse_norm, text_emb, ctx_aware)?;
                        gate = Some(gv);
                        f
                    }
                    None => residual_fuse(tape, store, &layers.fuse_norm, text_emb, ctx_aware)?,
                };
                match &layers.pooler {
                    Some(p) => {
                        let (v, w) = attentive_pool(tape, store, p, fused, &text.mask)?;
                        pool_weights = Some(w);
                        v
                    }
                    None => masked_mean_pool(tape, fused, &text.mask)?,
                }
            }
        };
        let logits = classify_head(tape, store, &self.head, pooled, mode)?;
        Ok(TextTrace {
            logits,
            pooled,
            gate,
            pool_weights,
        })
    }

    pub fn forward(&self, tape: &mut Tape, input: &TextInput, mode: &mut Mode) -> Result<Var> {
        Ok(self.trace(tape, input, mode)?.logits)
    }

    pub fn predict(&self, input: &TextInput) -> Result<Logits> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, input, &mut Mode::Eval)?;
        Logits::from_slice(tape.value(out).data())
    }
}
