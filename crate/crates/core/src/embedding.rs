//! Variate tokens plus channel, phase and joint channel–phase lookups,
//! fused by summation into the encoder input.
//!
//! Batched forms stack `B` windows of `C` tokens into `[B·C × d]` rows,
//! window-major. The joint table is stored flat as `[C·P × d]` with row
//! `channel·P + phase`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{init_normal, init_uniform, ParamId, ParamStore, TABLE_INIT_STD};
use crate::tensor::{Tape, Var};

/// The three auxiliary tables. The variate token projection is always on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Channel,
    Phase,
    Joint,
}

impl EmbeddingKind {
    pub const ALL: [EmbeddingKind; 3] = [EmbeddingKind::Channel, EmbeddingKind::Phase, EmbeddingKind::Joint];

    pub fn name(self) -> &'static str {
        match self {
            EmbeddingKind::Channel => "channel",
            EmbeddingKind::Phase => "phase",
            EmbeddingKind::Joint => "joint",
        }
    }
}

impl std::str::FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "channel" => Ok(Self::Channel),
            "phase" => Ok(Self::Phase),
            "joint" => Ok(Self::Joint),
            other => Err(Error::config("ablation", format!("unknown embedding `{other}`"))),
        }
    }
}

/// Handles to the learnable input-representation blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingTables {
    /// `W`, `[L × d]`.
    pub token_weight: ParamId,
    /// `b`, `[d]`.
    pub token_bias: ParamId,
    /// `[C × d]`.
    pub channel: ParamId,
    /// `[P × d]`.
    pub phase: ParamId,
    /// `[C·P × d]`.
    pub joint: ParamId,
}

impl EmbeddingTables {
    pub fn init(
        store: &mut ParamStore,
        lookback: usize,
        channels: usize,
        period: usize,
        d_model: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            token_weight: store.add("embed.token.weight", init_uniform(&[lookback, d_model], lookback, rng)),
            token_bias: store.add("embed.token.bias", init_uniform(&[d_model], lookback, rng)),
            channel: store.add("embed.channel", init_normal(&[channels, d_model], TABLE_INIT_STD, rng)),
            phase: store.add("embed.phase", init_normal(&[period, d_model], TABLE_INIT_STD, rng)),
            joint: store.add("embed.joint", init_normal(&[channels * period, d_model], TABLE_INIT_STD, rng)),
        }
    }

    pub fn table(&self, kind: EmbeddingKind) -> ParamId {
        match kind {
            EmbeddingKind::Channel => self.channel,
            EmbeddingKind::Phase => self.phase,
            EmbeddingKind::Joint => self.joint,
        }
    }
}

/// `E_x = Xᵀ W + b` for one `[L × C]` window.
pub fn variate_tokenize(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let xt = tape.transpose(x)?;
    tokenize_stacked(tape, xt, weight, bias)
}

/// Same projection on already-transposed, stacked windows `[B·C × L]`.
pub fn tokenize_stacked(tape: &mut Tape, xt: Var, weight: Var, bias: Var) -> Result<Var> {
    let proj = tape.matmul(xt, weight)?;
    tape.add_row(proj, bias)
}

/// Channel rows for `batch` windows: row `b·C + i` is `Ω_c[i]`.
pub fn embed_channels(tape: &mut Tape, table: Var, batch: usize) -> Result<Var> {
    let c = tape.value(table).shape()[0];
    let idx: Vec<usize> = (0..batch).flat_map(|_| 0..c).collect();
    tape.gather_rows(table, &idx)
}

/// `Ω_p[t mod P]` repeated over the `channels` tokens of each window.
pub fn embed_phase(tape: &mut Tape, table: Var, t_last: &[usize], period: usize, channels: usize) -> Result<Var> {
    check_period(tape, table, period, 1)?;
    let idx: Vec<usize> = t_last
        .iter()
        .flat_map(|t| std::iter::repeat_n(t % period, channels))
        .collect();
    tape.gather_rows(table, &idx)
}

/// `Ω_cp[i, t mod P]` for every channel `i` of each window.
pub fn embed_joint(tape: &mut Tape, table: Var, t_last: &[usize], period: usize, channels: usize) -> Result<Var> {
    check_period(tape, table, period, channels)?;
    let idx: Vec<usize> = t_last
        .iter()
        .flat_map(|t| (0..channels).map(move |i| i * period + t % period))
        .collect();
    tape.gather_rows(table, &idx)
}

fn check_period(tape: &Tape, table: Var, period: usize, channels: usize) -> Result<()> {
    let rows = tape.value(table).shape()[0];
    if period == 0 || rows != period * channels {
        return Err(Error::dim(
            "phase lookup",
            format!("table has {rows} rows, expected {channels}·{period}"),
        ));
    }
    Ok(())
}

/// `Z₀ = E_x + Σ parts`, summed left to right.
pub fn fuse(tape: &mut Tape, tokens: Var, parts: &[Var]) -> Result<Var> {
    parts.iter().try_fold(tokens, |acc, &p| tape.add(acc, p))
}
