//! Toy tokenizer and transformer text encoder.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{set_trainable, LayerNorm, TransformerBlock};
use crate::params::{init_normal, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, Var};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const START_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const END_ID: usize = 4;

const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[START]", "[SEP]", "[END]"];

/// Splits on whitespace; every punctuation character becomes its own token.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut start = None;
        for (i, ch) in chunk.char_indices() {
            if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_ascii()) {
                if let Some(s) = start.take() {
                    out.push(&chunk[s..i]);
                }
                out.push(&chunk[i..i + ch.len_utf8()]);
            } else if start.is_none() {
                start = Some(i);
            }
        }
        if let Some(s) = start {
            out.push(&chunk[s..]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from a corpus scan: specials first, then words by
    /// descending frequency, ties broken lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for w in split_words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(&str, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w.to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn word_ids(&self, text: &str) -> Vec<usize> {
        split_words(text).into_iter().map(|w| self.id(w)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Start,
    Separator,
    End,
    Pad,
    Word,
}

/// Token ids with their attention mask. Padding only appears as a suffix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    /// `[START] body [END]`, padded to `max_len`. The body must already fit.
    pub(crate) fn framed(body: Vec<usize>, max_len: usize) -> Self {
        let mut ids = Vec::with_capacity(max_len);
        ids.push(START_ID);
        ids.extend(body);
        ids.push(END_ID);
        let real = ids.len();
        ids.resize(max_len.max(real), PAD_ID);
        let mask = (0..ids.len()).map(|i| i < real).collect();
        TokenSequence { ids, mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn kind(&self, pos: usize) -> TokenKind {
        match self.ids[pos] {
            PAD_ID => TokenKind::Pad,
            START_ID => TokenKind::Start,
            SEP_ID => TokenKind::Separator,
            END_ID => TokenKind::End,
            _ => TokenKind::Word,
        }
    }

    /// The sequence with its padding suffix removed. Encoder outputs at the
    /// remaining positions are bitwise identical to the padded run.
    pub fn unpadded(&self) -> TokenSequence {
        let n = self.real_len();
        TokenSequence {
            ids: self.ids[..n].to_vec(),
            mask: self.mask[..n].to_vec(),
        }
    }
}

/// `[START] words [END] [PAD]...` of exactly `max_len` tokens; words beyond
/// the budget are dropped from the end.
pub fn tokenize(vocab: &Vocab, text: &str, max_len: usize) -> Result<TokenSequence> {
    if max_len < 3 {
        return Err(Error::contract(format!(
            "max_len must be at least 3, got {max_len}"
        )));
    }
    let mut body = vocab.word_ids(text);
    body.truncate(max_len - 2);
    Ok(TokenSequence::framed(body, max_len))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub trainable_layer_count: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 0,
            model_dim: 64,
            n_layers: 4,
            n_heads: 4,
            ffn_dim: 256,
            max_seq_len: 128,
            trainable_layer_count: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.n_heads == 0 || !self.model_dim.is_multiple_of(self.n_heads)
        {
            return Err(Error::contract(format!(
                "model_dim {} must be a positive multiple of n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.trainable_layer_count > self.n_layers {
            return Err(Error::contract(format!(
                "trainable_layer_count {} exceeds n_layers {}",
                self.trainable_layer_count, self.n_layers
            )));
        }
        if self.vocab_size <= END_ID || self.max_seq_len < 3 || self.ffn_dim == 0 {
            return Err(Error::contract(
                "vocab_size, max_seq_len and ffn_dim too small",
            ));
        }
        Ok(())
    }
}

/// Token + learned position embeddings, pre-norm blocks, final norm.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub config: EncoderConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: LayerNorm,
}

impl TextEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let token_embedding = store.add(
            format!("{name}.token_embedding"),
            init_normal(&[config.vocab_size, d], 0.1, rng),
            ParamGroup::Backbone,
        );
        let position_embedding = store.add(
            format!("{name}.position_embedding"),
            init_normal(&[config.max_seq_len, d], 0.1, rng),
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
        let enc = TextEncoder {
            token_embedding,
            position_embedding,
            blocks,
            final_norm,
            config: config.clone(),
        };
        enc.apply_trainable(store, config.trainable_layer_count)?;
        Ok(enc)
    }

    /// Runs the encoder; output is `[len, model_dim]`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &TokenSequence,
    ) -> Result<Var> {
        if tokens.is_empty() || tokens.ids.len() != tokens.mask.len() {
            return Err(Error::contract(
                "token sequence empty or mask length mismatch",
            ));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::contract(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::contract(format!(
                "token id {bad} outside vocabulary"
            )));
        }
        let tok_table = tape.param(store, self.token_embedding);
        let pos_table = tape.param(store, self.position_embedding);
        let tok = tape.gather_rows(tok_table, &tokens.ids)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = tape.gather_rows(pos_table, &positions)?;
        let mut h = tape.add(tok, pos)?;
        for block in &self.blocks {
            h = block.forward(tape, store, h, &tokens.mask)?;
        }
        self.final_norm.forward(tape, store, h)
    }

    /// Bottom-up parameter groups: embeddings, then one entry per block.
    /// The final norm travels with the top block.
    pub fn layer_groups(&self) -> (Vec<ParamId>, Vec<Vec<ParamId>>) {
        let embeddings = vec![self.token_embedding, self.position_embedding];
        let mut blocks: Vec<Vec<ParamId>> =
            self.blocks.iter().map(TransformerBlock::params).collect();
        if let Some(top) = blocks.last_mut() {
            top.extend(self.final_norm.params());
        }
        (embeddings, blocks)
    }

    fn apply_trainable(&self, store: &mut ParamStore, k: usize) -> Result<()> {
        let n = self.blocks.len();
        if k > n {
            return Err(Error::contract(format!(
                "cannot unfreeze {k} of {n} layers"
            )));
        }
        let (embeddings, blocks) = self.layer_groups();
        set_trainable(store, &embeddings, k == n);
        for (i, group) in blocks.iter().enumerate() {
            set_trainable(store, group, i >= n - k);
        }
        Ok(())
    }

    /// Only the top `k` blocks stay trainable; with `k == n_layers` the
    /// embeddings are trainable too.
    pub fn set_trainable_layers(&mut self, store: &mut ParamStore, k: usize) -> Result<()> {
        self.apply_trainable(store, k)?;
        self.config.trainable_layer_count = k;
        Ok(())
    }

    pub fn params(&self) -> Vec<ParamId> {
        let (mut all, blocks) = self.layer_groups();
        all.extend(blocks.into_iter().flatten());
        all
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config(vocab: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size: vocab,
            model_dim: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 16,
            max_seq_len: 16,
            trainable_layer_count: 2,
        }
    }

    #[test]
    fn split_words_separates_punctuation() {
        assert_eq!(
            split_words("Stop it, now!"),
            ["Stop", "it", ",", "now", "!"]
        );
        assert!(split_words("   ").is_empty());
    }

    #[test]
    fn empty_text_is_start_end_then_pad() {
        let vocab = Vocab::build(["a b"]);
        let t = tokenize(&vocab, "", 6).unwrap();
        assert_eq!(t.ids, [START_ID, END_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID]);
        assert_eq!(t.mask, [true, true, false, false, false, false]);
        assert_eq!(t.kind(0), TokenKind::Start);
        assert_eq!(t.kind(2), TokenKind::Pad);
        assert!(tokenize(&vocab, "a", 2).is_err());
    }

    #[test]
    fn tokenize_is_deterministic_and_truncates_the_end() {
        let vocab = Vocab::build(["one two three four"]);
        let a = tokenize(&vocab, "one two three four", 5).unwrap();
        assert_eq!(a, tokenize(&vocab, "one two three four", 5).unwrap());
        let words: Vec<_> = a.ids[1..4]
            .iter()
            .map(|&i| vocab.token(i).unwrap())
            .collect();
        assert_eq!(words, ["one", "two", "three"]);
        assert_eq!(a.ids[4], END_ID);
        assert_eq!(tokenize(&vocab, "zebra", 4).unwrap().ids[1], UNK_ID);
    }

    #[test]
    fn vocabulary_round_trips_a_synthetic_corpus() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let words = [
            "we", "must", "act", "now", "they", "failed", "you", "!", "freedom", "jobs",
        ];
        let corpus: Vec<String> = (0..100)
            .map(|_| {
                let n = rng.random_range(1..8);
                (0..n)
                    .map(|_| words[rng.random_range(0..words.len())])
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let vocab = Vocab::build(corpus.iter().map(String::as_str));
        // Oracle: the set of distinct words from a direct scan.
        let mut distinct: Vec<&str> = corpus.iter().flat_map(|s| split_words(s)).collect();
        distinct.sort();
        distinct.dedup();
        assert_eq!(vocab.len(), SPECIAL_TOKENS.len() + distinct.len());
        for sentence in &corpus {
            let ids = vocab.word_ids(sentence);
            let back: Vec<&str> = ids.iter().map(|&i| vocab.token(i).unwrap()).collect();
            assert_eq!(back, split_words(sentence));
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small_config(20);
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = small_config(20);
        c.trainable_layer_count = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn encode_shape_and_length_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut store, "enc", small_config(12), &mut rng).unwrap();
        let seq = TokenSequence::framed(vec![5, 6, 7], 9);
        let mut tape = Tape::new();
        let out = enc.encode(&mut tape, &store, &seq).unwrap();
        assert_eq!(tape.value(out).shape(), &[9, 8]);
        let long = TokenSequence::framed(vec![5; 20], 22);
        assert!(enc.encode(&mut tape, &store, &long).is_err());
        let bad = TokenSequence::framed(vec![99], 4);
        assert!(enc.encode(&mut tape, &store, &bad).is_err());
    }

    #[test]
    fn pad_content_never_reaches_unmasked_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut store, "enc", small_config(12), &mut rng).unwrap();
        let base = TokenSequence::framed(vec![5, 6], 8);
        let mut tape = Tape::new();
        let ref_out = {
            let v = enc.encode(&mut tape, &store, &base).unwrap();
            tape.value(v).clone()
        };
        for trial in 0..5 {
            let mut alt = base.clone();
            for i in 4..8 {
                alt.ids[i] = rng.random_range(0..12);
            }
            if trial == 0 {
                alt.ids.swap(5, 6);
            }
            let mut tape = Tape::new();
            let out = {
                let v = enc.encode(&mut tape, &store, &alt).unwrap();
                tape.value(v).clone()
            };
            for r in 0..4 {
                assert_eq!(out.row(r), ref_out.row(r));
            }
        }
        let mut tape = Tape::new();
        let trimmed = {
            let v = enc.encode(&mut tape, &store, &base.unpadded()).unwrap();
            tape.value(v).clone()
        };
        for r in 0..4 {
            assert_eq!(trimmed.row(r), ref_out.row(r));
        }
    }

    #[test]
    fn encode_is_deterministic_under_seed() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut store = ParamStore::new();
            let enc = TextEncoder::new(&mut store, "enc", small_config(12), &mut rng).unwrap();
            let mut tape = Tape::new();
            let v = enc
                .encode(&mut tape, &store, &TokenSequence::framed(vec![7, 8, 9], 6))
                .unwrap();
            tape.value(v).clone()
        };
        assert_eq!(build().data(), build().data());
    }

    // --- independent reference for a single-layer, single-head encoder ---

    fn ref_ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let d = x.len() as f64;
        let mean = x.iter().sum::<f64>() / d;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        x.iter()
            .zip(g.iter().zip(b))
            .map(|(v, (gg, bb))| gg * (v - mean) / (var + 1e-5).sqrt() + bb)
            .collect()
    }

    fn ref_affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
        let (rows, cols) = w.dims2().unwrap();
        (0..cols)
            .map(|j| (0..rows).map(|i| x[i] * w.get2(i, j)).sum::<f64>() + b.data()[j])
            .collect()
    }

    fn ref_gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    #[test]
    fn single_head_layer_matches_reference_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            vocab_size: 8,
            model_dim: 4,
            n_layers: 1,
            n_heads: 1,
            ffn_dim: 6,
            max_seq_len: 4,
            trainable_layer_count: 1,
        };
        let enc = TextEncoder::new(&mut store, "enc", cfg, &mut rng).unwrap();
        // Non-trivial norm parameters so the affine path is exercised.
        for (_, p) in store.clone().iter() {
            if p.name.ends_with("gamma") || p.name.ends_with("beta") {
                let id = store.id(&p.name).unwrap();
                store.set_value(id, Tensor::uniform(p.value.shape(), 0.5, 1.5, &mut rng));
            }
        }
        let ids = [5usize, 6];
        let tokens = TokenSequence {
            ids: ids.to_vec(),
            mask: vec![true, true],
        };
        let mut tape = Tape::new();
        let out = {
            let v = enc.encode(&mut tape, &store, &tokens).unwrap();
            tape.value(v).clone()
        };

        let v = |name: &str| store.get(store.id(name).unwrap()).value.clone();
        let emb = v("enc.token_embedding");
        let pos = v("enc.position_embedding");
        let x: Vec<Vec<f64>> = (0..2)
            .map(|t| {
                emb.row(ids[t])
                    .iter()
                    .zip(pos.row(t))
                    .map(|(a, b)| a + b)
                    .collect()
            })
            .collect();
        let p = "enc.blocks.0";
        let n1: Vec<Vec<f64>> = x
            .iter()
            .map(|r| {
                ref_ln(
                    r,
                    v(&format!("{p}.attn_norm.gamma")).data(),
                    v(&format!("{p}.attn_norm.beta")).data(),
                )
            })
            .collect();
        let proj = |name: &str, r: &[f64]| {
            ref_affine(
                r,
                &v(&format!("{p}.attn.{name}.weight")),
                &v(&format!("{p}.attn.{name}.bias")),
            )
        };
        let q: Vec<_> = n1.iter().map(|r| proj("query", r)).collect();
        let k: Vec<_> = n1.iter().map(|r| proj("key", r)).collect();
        let val: Vec<_> = n1.iter().map(|r| proj("value", r)).collect();
        let mut expected = Vec::new();
        for t in 0..2 {
            let s: Vec<f64> = (0..2)
                .map(|j| q[t].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / 2.0)
                .collect();
            let z = s[0].exp() + s[1].exp();
            let w = [s[0].exp() / z, s[1].exp() / z];
            let ctx: Vec<f64> = (0..4)
                .map(|c| w[0] * val[0][c] + w[1] * val[1][c])
                .collect();
            let a = proj("output", &ctx);
            let h: Vec<f64> = x[t].iter().zip(&a).map(|(p, q)| p + q).collect();
            let n2 = ref_ln(
                &h,
                v(&format!("{p}.ffn_norm.gamma")).data(),
                v(&format!("{p}.ffn_norm.beta")).data(),
            );
            let f: Vec<f64> = ref_affine(
                &n2,
                &v(&format!("{p}.ffn_in.weight")),
                &v(&format!("{p}.ffn_in.bias")),
            )
            .into_iter()
            .map(ref_gelu)
            .collect();
            let f = ref_affine(
                &f,
                &v(&format!("{p}.ffn_out.weight")),
                &v(&format!("{p}.ffn_out.bias")),
            );
            let h2: Vec<f64> = h.iter().zip(&f).map(|(a, b)| a + b).collect();
            expected.extend(ref_ln(
                &h2,
                v("enc.final_norm.gamma").data(),
                v("enc.final_norm.beta").data(),
            ));
        }
        for (a, b) in out.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    fn grads_by_param(enc: &TextEncoder, store: &ParamStore) -> Vec<(String, bool)> {
        let mut tape = Tape::new();
        let out = enc
            .encode(&mut tape, store, &TokenSequence::framed(vec![5, 6, 7], 5))
            .unwrap();
        let w = tape.constant(Tensor::uniform(
            &[5, 8],
            -1.0,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(3),
        ));
        let m = tape.mul(out, w).unwrap();
        let loss = tape.sum(m);
        let grads = tape.backward(loss).unwrap();
        let mut with_grad: Vec<String> = Vec::new();
        for (id, g) in grads.params() {
            if g.iter().any(|&v| v != 0.0) {
                with_grad.push(store.get(id).name.clone());
            }
        }
        store
            .iter()
            .map(|(_, p)| (p.name.clone(), with_grad.contains(&p.name)))
            .collect()
    }

    #[test]
    fn freezing_limits_gradient_flow_to_top_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let mut cfg = small_config(12);
        cfg.n_layers = 4;
        let mut enc = TextEncoder::new(&mut store, "enc", cfg, &mut rng).unwrap();
        assert!(enc.set_trainable_layers(&mut store, 5).is_err());

        enc.set_trainable_layers(&mut store, 3).unwrap();
        for (name, has_grad) in grads_by_param(&enc, &store) {
            let top = ["blocks.1", "blocks.2", "blocks.3", "final_norm"]
                .iter()
                .any(|s| name.contains(s));
            assert_eq!(has_grad, top, "{name}");
        }

        enc.set_trainable_layers(&mut store, 0).unwrap();
        assert!(grads_by_param(&enc, &store).iter().all(|(_, g)| !g));

        enc.set_trainable_layers(&mut store, 4).unwrap();
        assert!(grads_by_param(&enc, &store).iter().all(|(_, g)| *g));
    }
}
