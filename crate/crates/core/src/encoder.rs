//! Transformer encoder over variate tokens.
//!
//! Attention runs independently inside each window: the `[B·C × d]` token
//! matrix is split into `B` groups of `C` tokens and `h` heads of width
//! `d/h`. No mask and no positional signal are applied, so the encoder is
//! equivariant under any permutation of a window's tokens.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{init_uniform, Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Where layer normalisation sits relative to each residual sublayer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormStyle {
    /// `LN(f(z) + z)`.
    #[default]
    Post,
    /// `f(LN(z)) + z`.
    Pre,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderLayerParams {
    /// `[d × d]`: the per-head `W_k^Q` blocks side by side.
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    /// `W^O`, `[h·d_h × d]`.
    pub output: ParamId,
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub ff1_weight: ParamId,
    pub ff1_bias: ParamId,
    pub ff2_weight: ParamId,
    pub ff2_bias: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
}

impl EncoderLayerParams {
    pub fn init(store: &mut ParamStore, layer: usize, d_model: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        let p = |s: &str| format!("encoder.{layer}.{s}");
        Self {
            query: store.add(p("attn.query"), init_uniform(&[d_model, d_model], d_model, rng)),
            key: store.add(p("attn.key"), init_uniform(&[d_model, d_model], d_model, rng)),
            value: store.add(p("attn.value"), init_uniform(&[d_model, d_model], d_model, rng)),
            output: store.add(p("attn.output"), init_uniform(&[d_model, d_model], d_model, rng)),
            norm1_gain: store.add(p("norm1.gain"), Tensor::ones(&[d_model])),
            norm1_bias: store.add(p("norm1.bias"), Tensor::zeros(&[d_model])),
            ff1_weight: store.add(p("ffn.in.weight"), init_uniform(&[d_model, d_ff], d_model, rng)),
            ff1_bias: store.add(p("ffn.in.bias"), init_uniform(&[d_ff], d_model, rng)),
            ff2_weight: store.add(p("ffn.out.weight"), init_uniform(&[d_ff, d_model], d_ff, rng)),
            ff2_bias: store.add(p("ffn.out.bias"), init_uniform(&[d_model], d_ff, rng)),
            norm2_gain: store.add(p("norm2.gain"), Tensor::ones(&[d_model])),
            norm2_bias: store.add(p("norm2.bias"), Tensor::zeros(&[d_model])),
        }
    }

    pub fn bind(&self, bound: &Bound) -> LayerVars {
        LayerVars {
            query: bound[self.query],
            key: bound[self.key],
            value: bound[self.value],
            output: bound[self.output],
            norm1_gain: bound[self.norm1_gain],
            norm1_bias: bound[self.norm1_bias],
            ff1_weight: bound[self.ff1_weight],
            ff1_bias: bound[self.ff1_bias],
            ff2_weight: bound[self.ff2_weight],
            ff2_bias: bound[self.ff2_bias],
            norm2_gain: bound[self.norm2_gain],
            norm2_bias: bound[self.norm2_bias],
        }
    }
}

/// One encoder layer's parameters as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub output: Var,
    pub norm1_gain: Var,
    pub norm1_bias: Var,
    pub ff1_weight: Var,
    pub ff1_bias: Var,
    pub ff2_weight: Var,
    pub ff2_bias: Var,
    pub norm2_gain: Var,
    pub norm2_bias: Var,
}

/// Token layout of a stacked batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub windows: usize,
    pub tokens: usize,
    pub heads: usize,
}

/// Training-time dropout on attention weights and FFN hidden units.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, tape: &mut Tape, v: Var) -> Result<Var> {
        tape.dropout(v, self.rate, self.rng)
    }
}

/// Attention weights of one layer for one window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub layer: usize,
    /// `A^(k)`, one `[C × C]` row-stochastic matrix per head.
    pub heads: Vec<Vec<Vec<f64>>>,
    /// Head average `Ā`.
    pub mean: Vec<Vec<f64>>,
}

impl AttentionRecord {
    fn from_weights(layer: usize, weights: &Tensor, layout: TokenLayout) -> Vec<AttentionRecord> {
        let TokenLayout { windows, tokens: c, heads } = layout;
        let data = weights.data();
        (0..windows)
            .map(|b| {
                let mats: Vec<Vec<Vec<f64>>> = (0..heads)
                    .map(|k| {
                        let base = (b * heads + k) * c * c;
                        (0..c).map(|i| data[base + i * c..base + (i + 1) * c].to_vec()).collect()
                    })
                    .collect();
                let mean = (0..c)
                    .map(|i| {
                        (0..c)
                            .map(|j| mats.iter().map(|m| m[i][j]).sum::<f64>() / heads as f64)
                            .collect()
                    })
                    .collect();
                AttentionRecord { layer, heads: mats, mean }
            })
            .collect()
    }
}

pub fn check_heads(d_model: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !d_model.is_multiple_of(heads) {
        return Err(Error::config(
            "n_heads",
            format!("d_model = {d_model} is not divisible by {heads} heads"),
        ));
    }
    Ok(d_model / heads)
}

/// Splits `[B·C × d]` into `[B·h × C × d_h]`.
fn split_heads(tape: &mut Tape, x: Var, layout: TokenLayout, d_head: usize) -> Result<Var> {
    let TokenLayout { windows, tokens, heads } = layout;
    let r = tape.reshape(x, &[windows, tokens, heads, d_head])?;
    let p = tape.permute(r, &[0, 2, 1, 3])?;
    tape.reshape(p, &[windows * heads, tokens, d_head])
}

fn merge_heads(tape: &mut Tape, x: Var, layout: TokenLayout, d_head: usize) -> Result<Var> {
    let TokenLayout { windows, tokens, heads } = layout;
    let r = tape.reshape(x, &[windows, heads, tokens, d_head])?;
    let p = tape.permute(r, &[0, 2, 1, 3])?;
    tape.reshape(p, &[windows * tokens, heads * d_head])
}

/// Multi-head scaled dot-product self-attention within each window.
pub fn multi_head_attention(
    tape: &mut Tape,
    z: Var,
    p: &LayerVars,
    layout: TokenLayout,
    layer: usize,
    dropout: Option<&mut Dropout<'_>>,
    capture: bool,
) -> Result<(Var, Option<Vec<AttentionRecord>>)> {
    let [rows, d] = tape.value(z).dims2("multi_head_attention")?;
    if rows != layout.windows * layout.tokens {
        return Err(Error::dim(
            "multi_head_attention",
            format!("{rows} rows for {} windows of {} tokens", layout.windows, layout.tokens),
        ));
    }
    let d_head = check_heads(d, layout.heads)?;
    let q = tape.matmul(z, p.query)?;
    let k = tape.matmul(z, p.key)?;
    let v = tape.matmul(z, p.value)?;
    let q = split_heads(tape, q, layout, d_head)?;
    let k = split_heads(tape, k, layout, d_head)?;
    let v = split_heads(tape, v, layout, d_head)?;
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (d_head as f64).sqrt())?;
    let weights = tape.softmax(scores)?;
    let record = capture.then(|| AttentionRecord::from_weights(layer, tape.value(weights), layout));
    let weights = match dropout {
        Some(dr) => dr.apply(tape, weights)?,
        None => weights,
    };
    let heads = tape.batch_matmul(weights, v, false)?;
    let merged = merge_heads(tape, heads, layout, d_head)?;
    Ok((tape.matmul(merged, p.output)?, record))
}

/// Position-wise `d → d_ff → d` with GELU.
pub fn feed_forward(tape: &mut Tape, z: Var, p: &LayerVars, dropout: Option<&mut Dropout<'_>>) -> Result<Var> {
    let h = tape.matmul(z, p.ff1_weight)?;
    let h = tape.add_row(h, p.ff1_bias)?;
    let h = tape.gelu(h)?;
    let h = match dropout {
        Some(dr) => dr.apply(tape, h)?,
        None => h,
    };
    let o = tape.matmul(h, p.ff2_weight)?;
    tape.add_row(o, p.ff2_bias)
}

#[allow(clippy::too_many_arguments)]
pub fn encoder_layer(
    tape: &mut Tape,
    z: Var,
    p: &LayerVars,
    layout: TokenLayout,
    style: NormStyle,
    layer: usize,
    mut dropout: Option<&mut Dropout<'_>>,
    capture: bool,
) -> Result<(Var, Option<Vec<AttentionRecord>>)> {
    match style {
        NormStyle::Post => {
            let (a, rec) = multi_head_attention(tape, z, p, layout, layer, dropout.as_deref_mut(), capture)?;
            let r = tape.add(a, z)?;
            let z1 = tape.layer_norm(r, p.norm1_gain, p.norm1_bias)?;
            let f = feed_forward(tape, z1, p, dropout)?;
            let r = tape.add(f, z1)?;
            Ok((tape.layer_norm(r, p.norm2_gain, p.norm2_bias)?, rec))
        }
        NormStyle::Pre => {
            let n = tape.layer_norm(z, p.norm1_gain, p.norm1_bias)?;
            let (a, rec) = multi_head_attention(tape, n, p, layout, layer, dropout.as_deref_mut(), capture)?;
            let z1 = tape.add(a, z)?;
            let n = tape.layer_norm(z1, p.norm2_gain, p.norm2_bias)?;
            let f = feed_forward(tape, n, p, dropout)?;
            Ok((tape.add(f, z1)?, rec))
        }
    }
}

/// Applies every layer in order; optionally captures the last layer's
/// attention weights (one record per window).
pub fn encoder_forward(
    tape: &mut Tape,
    z0: Var,
    layers: &[LayerVars],
    layout: TokenLayout,
    style: NormStyle,
    mut dropout: Option<&mut Dropout<'_>>,
    capture_last: bool,
) -> Result<(Var, Option<Vec<AttentionRecord>>)> {
    if layers.is_empty() {
        return Err(Error::config("n_layers", "encoder needs at least one layer"));
    }
    let mut z = z0;
    let mut record = None;
    for (l, p) in layers.iter().enumerate() {
        let last = l + 1 == layers.len();
        let (next, rec) = encoder_layer(tape, z, p, layout, style, l, dropout.as_deref_mut(), capture_last && last)?;
        z = next;
        if last {
            record = rec;
        }
    }
    Ok((z, record))
}
