//! Flat TOML run configuration.

use std::path::{Path, PathBuf};

use emaformer::data::{load_csv_with, LoadOptions, TimeSeriesDataset};
use emaformer::embedding::EmbeddingKind;
use emaformer::encoder::NormStyle;
use emaformer::model::{Backbone, HeadKind};
use emaformer::trainer::TrainConfig;
use emaformer::{Error, ModelConfig, Result};
use serde::{Deserialize, Serialize};

pub const RESOLVED_FILE: &str = "resolved_config.toml";

/// Every key a run file may set. Dataset-dependent keys left unset are
/// filled in by [`RunConfig::resolve`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub no_timestamp_column: bool,
    pub max_rows: Option<usize>,
    pub steps_per_day: Option<usize>,
    pub out_dir: PathBuf,
    pub split_train: Option<f64>,
    pub split_valid: Option<f64>,
    pub split_test: Option<f64>,

    pub lookback: usize,
    pub horizon: usize,
    pub period: Option<usize>,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub norm_style: NormStyle,
    pub revin: bool,
    pub ablation: Vec<EmbeddingKind>,
    pub backbone: Backbone,
    pub head: HeadKind,
    pub mean_input: bool,
    pub dropout: f64,
    pub seed: u64,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub train_stride: usize,
    pub eval_stride: usize,

    pub day_len: Option<usize>,
    pub entropy_phase: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        Self {
            dataset: None,
            no_timestamp_column: false,
            max_rows: None,
            steps_per_day: None,
            out_dir: PathBuf::from("runs/default"),
            split_train: None,
            split_valid: None,
            split_test: None,
            lookback: m.lookback,
            horizon: m.horizon,
            period: None,
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            norm_style: m.norm_style,
            revin: m.revin,
            ablation: Vec::new(),
            backbone: m.backbone,
            head: m.head,
            mean_input: m.mean_input,
            dropout: m.dropout,
            seed: m.seed,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            clip_norm: t.clip_norm,
            train_stride: t.train_stride,
            eval_stride: t.eval_stride,
            day_len: None,
            entropy_phase: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let key = offending_key(text, &e).unwrap_or_else(|| "config".into());
            Error::Config { key, reason: e.message().trim().to_string() }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            key: "config".into(),
            reason: format!("cannot read {}: {e}", path.display()),
        })?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative dataset paths are relative to the config file.
        if let (Some(ds), Some(dir)) = (&cfg.dataset, path.parent()) {
            if ds.is_relative() {
                cfg.dataset = Some(dir.join(ds));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Checks every key that does not depend on the dataset.
    pub fn validate(&self) -> Result<()> {
        if self.dataset.is_none() {
            return Err(Error::Config { key: "dataset".into(), reason: "missing path to the CSV file".into() });
        }
        let mut model = self.model_config(1, 1);
        model.period = self.period.unwrap_or(1);
        model.validate()?;
        self.train_config().validate()?;
        if let Some(0) = self.steps_per_day {
            return Err(config_error("steps_per_day", "must be positive"));
        }
        if let Some(d) = self.day_len {
            if d < 2 {
                return Err(config_error("day_len", "must be at least 2"));
            }
        }
        for (key, v) in [("split_train", self.split_train), ("split_valid", self.split_valid), ("split_test", self.split_test)] {
            if let Some(r) = v {
                if !(r > 0.0 && r < 1.0) {
                    return Err(config_error(key, format!("{r} not in (0, 1)")));
                }
            }
        }
        let set = [self.split_train, self.split_valid, self.split_test].iter().filter(|v| v.is_some()).count();
        if set != 0 && set != 3 {
            return Err(config_error("split_train", "set all three split ratios or none"));
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<TimeSeriesDataset> {
        let path = self.dataset.as_ref().ok_or_else(|| config_error("dataset", "missing path to the CSV file"))?;
        let opts = LoadOptions {
            no_timestamp_column: self.no_timestamp_column,
            max_rows: self.max_rows,
            period_daily: self.steps_per_day,
            start_index: 0,
        };
        load_csv_with(path, &opts).map_err(|e| match e {
            Error::Io { path, source } => config_error("dataset", format!("cannot read {}: {source}", path.display())),
            other => other,
        })
    }

    /// Fills dataset-dependent keys so the echoed file reproduces the run.
    pub fn resolve(&mut self, ds: &TimeSeriesDataset) {
        let preset = ds.preset();
        self.steps_per_day.get_or_insert(ds.period_daily);
        self.period.get_or_insert(preset.map_or(ds.period_daily, |p| p.default_period()));
        self.day_len.get_or_insert(ds.period_daily);
        let (tr, va, te) = preset.map_or((0.7, 0.1, 0.2), |p| p.split);
        self.split_train.get_or_insert(tr);
        self.split_valid.get_or_insert(va);
        self.split_test.get_or_insert(te);
    }

    pub fn ratios(&self) -> (f64, f64, f64) {
        (self.split_train.unwrap_or(0.7), self.split_valid.unwrap_or(0.1), self.split_test.unwrap_or(0.2))
    }

    pub fn model_config(&self, channels: usize, period: usize) -> ModelConfig {
        ModelConfig {
            lookback: self.lookback,
            horizon: self.horizon,
            channels,
            period: self.period.unwrap_or(period),
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            norm_style: self.norm_style,
            revin: self.revin,
            ablation: self.ablation.iter().copied().collect(),
            backbone: self.backbone,
            head: self.head,
            mean_input: self.mean_input,
            dropout: self.dropout,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            clip_norm: self.clip_norm,
            train_stride: self.train_stride,
            eval_stride: self.eval_stride,
        }
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
        let path = dir.join(RESOLVED_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        Ok(path)
    }
}

fn config_error(key: &str, reason: impl Into<String>) -> Error {
    Error::Config { key: key.into(), reason: reason.into() }
}

/// Names the key behind a TOML error: from an `unknown field` message, or
/// from the `key = value` line the error points into.
fn offending_key(text: &str, err: &toml::de::Error) -> Option<String> {
    let msg = err.message();
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        return rest.split('`').next().map(str::to_string);
    }
    let span = err.span()?;
    let line_start = text[..span.start].rfind('\n').map_or(0, |i| i + 1);
    let line = text[line_start..].lines().next()?;
    let (key, _) = line.split_once('=')?;
    let key = key.trim();
    (!key.is_empty() && !key.starts_with('#')).then(|| key.to_string())
}
