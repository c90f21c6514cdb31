//! Layers shared by the text and audio models.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{init_xavier, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Forward-pass mode. Dropout is only active in training.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    pub fn dropout(&mut self, tape: &mut Tape, x: Var, p: f64) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train(rng) => tape.dropout(x, p, *rng),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_xavier(input, output, rng),
            group,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[output]), group);
        Linear {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_row_bias(xw, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[dim], 1.0), group),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), group),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Feed-forward stack `input -> hidden... -> output` with GELU and dropout
/// between layers. The last layer is linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub dropout: f64,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
        dropout: f64,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], group, rng))
            .collect();
        Mlp { layers, dropout }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mode: &mut Mode,
    ) -> Result<Var> {
        let width = tape.value(x).shape().last().copied().unwrap_or(0);
        if width != self.input_width() {
            return Err(Error::contract(format!(
                "MLP expects input width {}, got {width}",
                self.input_width()
            )));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i < last {
                h = tape.gelu(h);
                h = mode.dropout(tape, h, self.dropout)?;
            }
        }
        Ok(h)
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("non-empty MLP")
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

/// Multi-head scaled dot-product attention. Queries come from one sequence,
/// keys and values from another (the same one for self-attention).
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        n_heads: usize,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            n_heads > 0 && dim.is_multiple_of(n_heads),
            "model dim {dim} not divisible by {n_heads} heads"
        );
        MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, group, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, group, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, group, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, group, rng),
            n_heads,
        }
    }

    /// `key_keep[j]` false excludes key position `j` from every query.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        keys: Var,
        key_keep: &[bool],
    ) -> Result<Var> {
        let (s_q, dim) = tape.value(queries).dims2()?;
        let (s_k, dim_k) = tape.value(keys).dims2()?;
        if dim != dim_k || key_keep.len() != s_k {
            return Err(Error::ShapeMismatch {
                op: "attention",
                left: vec![s_q, dim],
                right: vec![s_k, dim_k, key_keep.len()],
            });
        }
        let q = self.query.forward(tape, store, queries)?;
        let k = self.key.forward(tape, store, keys)?;
        let v = self.value.forward(tape, store, keys)?;
        let head_dim = dim / self.n_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let keep: Vec<bool> = (0..s_q).flat_map(|_| key_keep.iter().copied()).collect();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
            let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
            let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.masked_softmax(scores, 1, Some(&keep))?;
            heads.push(tape.matmul(weights, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        self.output.forward(tape, store, merged)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.query, &self.key, &self.value, &self.output]
            .into_iter()
            .flat_map(Linear::params)
            .collect()
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `h + ffn(ln(h))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        n_heads: usize,
        ffn_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let g = ParamGroup::Backbone;
        TransformerBlock {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), dim, g),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, n_heads, g, rng),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), dim, g),
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), dim, ffn_dim, g, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), ffn_dim, dim, g, rng),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        keep: &[bool],
    ) -> Result<Var> {
        let n = self.attn_norm.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, n, n, keep)?;
        let h = tape.add(x, a)?;
        let n = self.ffn_norm.forward(tape, store, h)?;
        let f = self.ffn_in.forward(tape, store, n)?;
        let f = tape.gelu(f);
        let f = self.ffn_out.forward(tape, store, f)?;
        tape.add(h, f)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.attn_norm.params();
        p.extend(self.attn.params());
        p.extend(self.ffn_norm.params());
        p.extend(self.ffn_in.params());
        p.extend(self.ffn_out.params());
        p
    }
}

/// Weighted row sum `Σ_r w_r · x[r]` as a `[1, d]` node; `weights` are constants.
pub fn weighted_row_sum(tape: &mut Tape, x: Var, weights: Vec<f64>) -> Result<Var> {
    let (rows, _) = tape.value(x).dims2()?;
    if weights.len() != rows {
        return Err(Error::Dimension {
            op: "weighted_row_sum",
            detail: format!("{} weights for {rows} rows", weights.len()),
        });
    }
    let w = tape.constant(Tensor::new(vec![1, rows], weights)?);
    tape.matmul(w, x)
}

/// Freezes or unfreezes a group of parameters.
pub fn set_trainable(store: &mut ParamStore, ids: &[ParamId], trainable: bool) {
    for &id in ids {
        store.set_trainable(id, trainable);
    }
}
