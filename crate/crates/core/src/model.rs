//! The end-to-end forecaster: instance normalisation, embedding fusion,
//! encoder (or none), projection head and denormalisation.

use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{WindowSample, STD_FLOOR};
use crate::embedding::{self, EmbeddingKind, EmbeddingTables};
use crate::encoder::{self, AttentionRecord, Dropout, EncoderLayerParams, NormStyle, TokenLayout};
use crate::error::{Error, Result};
use crate::params::{init_uniform, rng_for, Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    #[default]
    Transformer,
    /// No encoder: the fused embedding goes straight to the head.
    MlpOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Linear,
    #[default]
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    pub period: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub norm_style: NormStyle,
    pub revin: bool,
    /// Disabled auxiliary embeddings.
    pub ablation: BTreeSet<EmbeddingKind>,
    pub backbone: Backbone,
    pub head: HeadKind,
    pub mean_input: bool,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lookback: 96,
            horizon: 96,
            channels: 7,
            period: 24,
            d_model: 256,
            n_layers: 2,
            n_heads: 8,
            d_ff: 512,
            norm_style: NormStyle::Post,
            revin: true,
            ablation: BTreeSet::new(),
            backbone: Backbone::Transformer,
            head: HeadKind::Mlp,
            mean_input: false,
            dropout: 0.1,
            seed: 2024,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("channels", self.channels),
            ("period", self.period),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.backbone == Backbone::Transformer {
            if self.n_layers == 0 {
                return Err(Error::config("n_layers", "must be positive"));
            }
            encoder::check_heads(self.d_model, self.n_heads)?;
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", format!("{} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn uses(&self, kind: EmbeddingKind) -> bool {
        !self.ablation.contains(&kind)
    }

    /// Short label for reports: `token-only`, `token+channel`, `full`, ...
    pub fn variant_tag(&self) -> String {
        let on: Vec<&str> = EmbeddingKind::ALL
            .iter()
            .filter(|k| self.uses(**k))
            .map(|k| k.name())
            .collect();
        match on.len() {
            0 => "token-only".into(),
            3 => "full".into(),
            _ => format!("token+{}", on.join("+")),
        }
    }
}

/// Per-window, per-channel lookback statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InstanceStats {
    /// Population statistics of each column of a `[L × C]` lookback.
    pub fn from_lookback(x: &Tensor) -> Result<Self> {
        let [l, c] = x.dims2("instance stats")?;
        if l == 0 {
            return Err(Error::dim("instance stats", "empty lookback"));
        }
        let mut mean = vec![0.0; c];
        for r in 0..l {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= l as f64);
        let mut var = vec![0.0; c];
        for r in 0..l {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / l as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadParams {
    Linear { weight: ParamId, bias: ParamId },
    Mlp { w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId },
}

/// Bound head parameters.
#[derive(Clone, Copy, Debug)]
pub enum HeadVars {
    Linear { weight: Var, bias: Var },
    Mlp { w1: Var, b1: Var, w2: Var, b2: Var },
}

impl HeadParams {
    fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, f, h) = (cfg.d_model, cfg.d_ff, cfg.horizon);
        match cfg.head {
            HeadKind::Linear => HeadParams::Linear {
                weight: store.add("head.weight", init_uniform(&[d, h], d, rng)),
                bias: store.add("head.bias", init_uniform(&[h], d, rng)),
            },
            HeadKind::Mlp => HeadParams::Mlp {
                w1: store.add("head.hidden.weight", init_uniform(&[d, f], d, rng)),
                b1: store.add("head.hidden.bias", init_uniform(&[f], d, rng)),
                w2: store.add("head.out.weight", init_uniform(&[f, h], f, rng)),
                b2: store.add("head.out.bias", init_uniform(&[h], f, rng)),
            },
        }
    }

    pub fn bind(&self, bound: &Bound) -> HeadVars {
        match *self {
            HeadParams::Linear { weight, bias } => HeadVars::Linear { weight: bound[weight], bias: bound[bias] },
            HeadParams::Mlp { w1, b1, w2, b2 } => HeadVars::Mlp {
                w1: bound[w1],
                b1: bound[b1],
                w2: bound[w2],
                b2: bound[b2],
            },
        }
    }
}

/// Per-token projection `[n × d] → [n × H]`.
pub fn head_mlp(tape: &mut Tape, z: Var, head: &HeadVars) -> Result<Var> {
    match *head {
        HeadVars::Linear { weight, bias } => {
            let o = tape.matmul(z, weight)?;
            tape.add_row(o, bias)
        }
        HeadVars::Mlp { w1, b1, w2, b2 } => {
            let h = tape.matmul(z, w1)?;
            let h = tape.add_row(h, b1)?;
            let h = tape.gelu(h)?;
            let o = tape.matmul(h, w2)?;
            tape.add_row(o, b2)
        }
    }
}

/// Whether dropout is active.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

/// Result of one batched forward pass. Row `b·C + i` of the `[B·C × H]`
/// outputs is channel `i` of window `b`.
pub struct ForwardPass {
    pub prediction: Var,
    pub pre_denorm: Var,
    pub bound: Bound,
    pub attention: Option<Vec<AttentionRecord>>,
    pub windows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmaFormer {
    cfg: ModelConfig,
    params: ParamStore,
    embeddings: EmbeddingTables,
    layers: Vec<EncoderLayerParams>,
    head: HeadParams,
}

impl EmaFormer {
    /// Builds and initialises a model. Parameters are drawn in a fixed order
    /// from `cfg.seed`, so ablation flags change which tables are used but not
    /// the draws of the others.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(cfg.seed, 0);
        let mut params = ParamStore::new();
        let embeddings = EmbeddingTables::init(&mut params, cfg.lookback, cfg.channels, cfg.period, cfg.d_model, &mut rng);
        for kind in &cfg.ablation {
            let id = embeddings.table(*kind);
            params.get_mut(id).data_mut().fill(0.0);
            params.freeze(id);
        }
        let layers = match cfg.backbone {
            Backbone::Transformer => (0..cfg.n_layers)
                .map(|l| EncoderLayerParams::init(&mut params, l, cfg.d_model, cfg.d_ff, &mut rng))
                .collect(),
            Backbone::MlpOnly => Vec::new(),
        };
        let head = HeadParams::init(&mut params, &cfg, &mut rng);
        Ok(Self { cfg, params, embeddings, layers, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn embeddings(&self) -> &EmbeddingTables {
        &self.embeddings
    }

    pub fn layers(&self) -> &[EncoderLayerParams] {
        &self.layers
    }

    pub fn head(&self) -> &HeadParams {
        &self.head
    }

    /// Batched forward over windows given as `[L × C]` lookbacks and the
    /// absolute index of each lookback's last step.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        lookbacks: &[&Tensor],
        t_last: &[usize],
        mode: Mode<'_>,
        capture: bool,
    ) -> Result<ForwardPass> {
        let cfg = &self.cfg;
        let (l, c) = (cfg.lookback, cfg.channels);
        let b = lookbacks.len();
        if b == 0 || t_last.len() != b {
            return Err(Error::dim("forward", format!("{b} lookbacks with {} time indices", t_last.len())));
        }

        // Stack as [B·C × L] (each window transposed), normalising per window.
        let mut stacked = vec![0.0; b * c * l];
        let mut scale = Vec::with_capacity(b * c);
        let mut shift = Vec::with_capacity(b * c);
        for (w, x) in lookbacks.iter().enumerate() {
            if x.shape() != [l, c] {
                return Err(Error::dim("forward", format!("lookback {:?}, expected [{l}, {c}]", x.shape())));
            }
            let stats = if cfg.revin { Some(InstanceStats::from_lookback(x)?) } else { None };
            for ch in 0..c {
                let (m, s) = stats.as_ref().map_or((0.0, 1.0), |st| (st.mean[ch], st.std[ch]));
                scale.push(s);
                shift.push(m);
                if cfg.mean_input {
                    continue;
                }
                let row = &mut stacked[(w * c + ch) * l..(w * c + ch + 1) * l];
                for (t, dst) in row.iter_mut().enumerate() {
                    *dst = (x.data()[t * c + ch] - m) / s;
                }
            }
        }

        let bound = self.params.bind(tape);
        let xt = tape.constant(Tensor::new(&[b * c, l], stacked)?);
        let e = &self.embeddings;
        let tokens = embedding::tokenize_stacked(tape, xt, bound[e.token_weight], bound[e.token_bias])?;
        let mut parts = Vec::with_capacity(3);
        if cfg.uses(EmbeddingKind::Channel) {
            parts.push(embedding::embed_channels(tape, bound[e.channel], b)?);
        }
        if cfg.uses(EmbeddingKind::Phase) {
            parts.push(embedding::embed_phase(tape, bound[e.phase], t_last, cfg.period, c)?);
        }
        if cfg.uses(EmbeddingKind::Joint) {
            parts.push(embedding::embed_joint(tape, bound[e.joint], t_last, cfg.period, c)?);
        }
        let z0 = embedding::fuse(tape, tokens, &parts)?;

        let (zn, attention) = match cfg.backbone {
            Backbone::Transformer => {
                let layers: Vec<_> = self.layers.iter().map(|p| p.bind(&bound)).collect();
                let layout = TokenLayout { windows: b, tokens: c, heads: cfg.n_heads };
                match mode {
                    Mode::Train(rng) if cfg.dropout > 0.0 => {
                        let mut dr = Dropout { rate: cfg.dropout, rng };
                        encoder::encoder_forward(tape, z0, &layers, layout, cfg.norm_style, Some(&mut dr), capture)?
                    }
                    _ => encoder::encoder_forward(tape, z0, &layers, layout, cfg.norm_style, None, capture)?,
                }
            }
            Backbone::MlpOnly => (z0, None),
        };

        let pre_denorm = head_mlp(tape, zn, &self.head.bind(&bound))?;
        let prediction = if cfg.revin {
            tape.row_affine(pre_denorm, &scale, &shift)?
        } else {
            pre_denorm
        };
        Ok(ForwardPass { prediction, pre_denorm, bound, attention, windows: b })
    }

    /// Inference on one `[L × C]` lookback: returns the `[H × C]` forecast.
    pub fn forward(&self, x: &Tensor, t_last: usize) -> Result<Tensor> {
        Ok(self.predict(&[x], &[t_last])?.remove(0))
    }

    /// Inference forecasts for several windows, each `[H × C]`.
    pub fn predict(&self, lookbacks: &[&Tensor], t_last: &[usize]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let pass = self.forward_batch(&mut tape, lookbacks, t_last, Mode::Eval, false)?;
        unstack(tape.value(pass.prediction), pass.windows, self.cfg.channels)
    }

    /// Head output before denormalisation, `[H × C]` per window.
    pub fn predict_pre_denorm(&self, lookbacks: &[&Tensor], t_last: &[usize]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let pass = self.forward_batch(&mut tape, lookbacks, t_last, Mode::Eval, false)?;
        unstack(tape.value(pass.pre_denorm), pass.windows, self.cfg.channels)
    }

    /// Last-layer attention for each window, in inference mode.
    pub fn attention(&self, lookbacks: &[&Tensor], t_last: &[usize]) -> Result<Vec<AttentionRecord>> {
        if self.cfg.backbone != Backbone::Transformer {
            return Err(Error::Contract("attention capture needs the transformer backbone".into()));
        }
        let mut tape = Tape::new();
        let pass = self.forward_batch(&mut tape, lookbacks, t_last, Mode::Eval, true)?;
        Ok(pass.attention.expect("captured"))
    }

    pub fn predict_windows(&self, windows: &[WindowSample]) -> Result<Vec<Tensor>> {
        let xs: Vec<&Tensor> = windows.iter().map(|w| &w.x).collect();
        let ts: Vec<usize> = windows.iter().map(|w| w.t_last).collect();
        self.predict(&xs, &ts)
    }
}

/// `[B·C × H]` rows → `B` tensors of shape `[H × C]`.
pub fn unstack(rows: &Tensor, windows: usize, channels: usize) -> Result<Vec<Tensor>> {
    let [n, h] = rows.dims2("unstack")?;
    if n != windows * channels {
        return Err(Error::dim("unstack", format!("{n} rows for {windows}×{channels}")));
    }
    (0..windows)
        .map(|b| {
            let mut out = vec![0.0; h * channels];
            for ch in 0..channels {
                for (t, v) in rows.row(b * channels + ch).iter().enumerate() {
                    out[t * channels + ch] = *v;
                }
            }
            Tensor::new(&[h, channels], out)
        })
        .collect()
}

/// `B` targets of shape `[H × C]` → `[B·C × H]` rows.
pub fn stack_targets(targets: &[&Tensor]) -> Result<Tensor> {
    let first = targets.first().ok_or_else(|| Error::dim("stack_targets", "no targets"))?;
    let [h, c] = first.dims2("stack_targets")?;
    let mut out = Vec::with_capacity(targets.len() * h * c);
    for y in targets {
        if y.shape() != [h, c] {
            return Err(Error::dim("stack_targets", format!("{:?} vs [{h}, {c}]", y.shape())));
        }
        for ch in 0..c {
            out.extend((0..h).map(|t| y.data()[t * c + ch]));
        }
    }
    Tensor::new(&[targets.len() * c, h], out)
}
