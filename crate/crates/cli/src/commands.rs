use std::fs;
use std::path::{Path, PathBuf};

use emaformer::checkpoint;
use emaformer::data::{Split, TimeSeriesDataset};
use emaformer::diagnostics::{attention_entropy, cov_matrix, daily_correlations};
use emaformer::trainer::{evaluate, train as run_training, Metrics, PreparedData, TrainData};
use emaformer::{EmaFormer, Error, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{Common, DiagnoseMode};

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.no_timestamp_column {
        cfg.no_timestamp_column = true;
    }
    Ok(cfg)
}

/// Config with dataset-dependent keys resolved, plus the raw dataset.
fn load_run(common: &Common) -> Result<(RunConfig, TimeSeriesDataset)> {
    let mut cfg = load_config(common)?;
    cfg.validate()?;
    let ds = cfg.load_dataset()?;
    cfg.resolve(&ds);
    Ok((cfg, ds))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

/// One entry per requested horizon: the per-horizon config and its directory.
fn horizon_runs(cfg: &RunConfig, horizons: &[usize]) -> Vec<(RunConfig, PathBuf)> {
    if horizons.is_empty() {
        return vec![(cfg.clone(), cfg.out_dir.clone())];
    }
    horizons
        .iter()
        .map(|&h| {
            let dir = cfg.out_dir.join(format!("horizon_{h}"));
            (RunConfig { horizon: h, out_dir: dir.clone(), ..cfg.clone() }, dir)
        })
        .collect()
}

fn prepare(run: &RunConfig, ds: &TimeSeriesDataset) -> Result<PreparedData> {
    run.validate()?;
    PreparedData::new(ds, run.ratios(), run.lookback, run.horizon)
}

fn period_of(run: &RunConfig, ds: &TimeSeriesDataset) -> usize {
    run.period.unwrap_or(ds.period_daily)
}

pub fn train(common: &Common, horizons: &[usize]) -> Result<()> {
    let (cfg, ds) = load_run(common)?;
    for (run, dir) in horizon_runs(&cfg, horizons) {
        let prepared = prepare(&run, &ds)?;
        let period = period_of(&run, &ds);
        let train_cfg = run.train_config();
        let data = TrainData::from_prepared(&prepared, period, &train_cfg)?;
        let mut model = EmaFormer::new(run.model_config(ds.channels(), period))?;
        run.write_resolved(&dir)?;
        println!("# {} horizon {} ({} training windows)", model.config().variant_tag(), run.horizon, data.train.len());
        println!("epoch, train_l1, valid_mse, valid_mae");
        let report = run_training(&mut model, &data, &train_cfg, Some(&dir.join("checkpoint")), |e| {
            println!("{}", e.line())
        })?;
        write_json(&dir.join("train_report.json"), &report)?;
        println!(
            "best epoch {}: test mse {:.6}, mae {:.6}",
            report.best_epoch, report.test.mse, report.test.mae
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    horizon: usize,
    #[serde(flatten)]
    metrics: Metrics,
}

#[derive(Serialize)]
struct EvalReport {
    rows: Vec<EvalRow>,
    average: Option<(f64, f64)>,
}

fn checkpoint_path(template: Option<&str>, dir: &Path, horizon: usize) -> PathBuf {
    match template {
        Some(t) => PathBuf::from(t.replace("{horizon}", &horizon.to_string())),
        None => dir.join("checkpoint"),
    }
}

fn load_checkpoint(path: &Path, expected: Option<&emaformer::ModelConfig>) -> Result<EmaFormer> {
    if !path.join(checkpoint::MANIFEST_FILE).is_file() {
        return Err(Error::Config {
            key: "checkpoint".into(),
            reason: format!("no checkpoint manifest in {}", path.display()),
        });
    }
    match expected {
        Some(cfg) => checkpoint::load_matching(path, cfg),
        None => checkpoint::load(path),
    }
}

pub fn eval(common: &Common, template: Option<&str>, horizons: &[usize], dump: bool) -> Result<()> {
    let (cfg, ds) = load_run(common)?;
    let mut rows = Vec::new();
    println!("horizon, mse, mae");
    for (run, dir) in horizon_runs(&cfg, horizons) {
        let prepared = prepare(&run, &ds)?;
        let period = period_of(&run, &ds);
        let expected = run.model_config(ds.channels(), period);
        let model = load_checkpoint(&checkpoint_path(template, &dir, run.horizon), Some(&expected))?;
        let windows = prepared.windows(Split::Test, period, run.eval_stride)?;
        let metrics = evaluate(&model, &windows)?;
        println!("{}, {:.6}, {:.6}", run.horizon, metrics.mse, metrics.mae);
        if dump {
            dump_forecasts(&model, &prepared, &windows, &cfg.out_dir.join("forecasts"), run.horizon, &ds.channel_names)?;
        }
        rows.push(EvalRow { horizon: run.horizon, metrics });
    }
    let average = (rows.len() > 1).then(|| {
        let n = rows.len() as f64;
        (rows.iter().map(|r| r.metrics.mse).sum::<f64>() / n, rows.iter().map(|r| r.metrics.mae).sum::<f64>() / n)
    });
    if let Some((mse, mae)) = average {
        println!("average, {mse:.6}, {mae:.6}");
    }
    let mut csv_text = String::from("horizon,mse,mae\n");
    for r in &rows {
        csv_text += &format!("{},{},{}\n", r.horizon, r.metrics.mse, r.metrics.mae);
    }
    if let Some((mse, mae)) = average {
        csv_text += &format!("average,{mse},{mae}\n");
    }
    let path = cfg.out_dir.join("eval.csv");
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Io { path: cfg.out_dir.clone(), source: e })?;
    fs::write(&path, csv_text).map_err(|e| Error::Io { path, source: e })?;
    write_json(&cfg.out_dir.join("eval_report.json"), &EvalReport { rows, average })
}

/// Forecasts in the dataset's original scale, `H` rows per window.
fn dump_forecasts(
    model: &EmaFormer,
    prepared: &PreparedData,
    windows: &emaformer::data::WindowSet<'_>,
    dir: &Path,
    horizon: usize,
    channel_names: &[String],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    let indices: Vec<usize> = (0..windows.len()).collect();
    for (b, chunk) in indices.chunks(64).enumerate() {
        let samples: Vec<_> = chunk.iter().map(|&i| windows.get(i)).collect();
        let preds = model.predict_windows(&samples)?;
        let path = dir.join(format!("h{horizon}_batch{b:04}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Io { path: path.clone(), source: e.into() })?;
        let io = |e: csv::Error| Error::Io { path: path.clone(), source: e.into() };
        w.write_record(channel_names).map_err(io)?;
        for p in &preds {
            let raw = prepared.normalizer.invert(p)?;
            for t in 0..horizon {
                w.write_record(raw.row(t).iter().map(|v| v.to_string())).map_err(io)?;
            }
        }
        w.flush().map_err(|e| Error::Io { path: path.clone(), source: e })?;
    }
    Ok(())
}

pub fn diagnose(common: &Common, mode: DiagnoseMode, checkpoint: Option<&Path>) -> Result<()> {
    if let (DiagnoseMode::Entropy, None) = (mode, checkpoint) {
        return Err(Error::Config {
            key: "checkpoint".into(),
            reason: "entropy analysis needs a trained model (--checkpoint)".into(),
        });
    }
    let (cfg, ds) = load_run(common)?;
    match mode {
        DiagnoseMode::Cov => {
            let day_len = cfg.day_len.unwrap_or(ds.period_daily);
            let report = cov_matrix(&daily_correlations(&ds.values, day_len)?)?;
            if report.all_invalid() {
                log::warn!("every channel pair has fewer than 2 days with non-constant values; all pairs are invalid");
            }
            let dir = cfg.out_dir.join("cov");
            report.write(&dir)?;
            cfg.write_resolved(&cfg.out_dir)?;
            println!("{} channels, {} days of {day_len} steps", report.channels, report.days);
            match report.max_off_diagonal() {
                Some((i, j, v)) => println!(
                    "max off-diagonal CoV {v:.4} ({} / {}); {} pair(s) above 1",
                    ds.channel_names[i],
                    ds.channel_names[j],
                    report.pairs_above(1.0)
                ),
                None => println!("no finite off-diagonal CoV"),
            }
        }
        DiagnoseMode::Entropy => {
            let prepared = prepare(&cfg, &ds)?;
            let period = period_of(&cfg, &ds);
            let expected = cfg.model_config(ds.channels(), period);
            let model = load_checkpoint(checkpoint.expect("checked above"), Some(&expected))?;
            let windows = prepared.windows(Split::Test, period, cfg.eval_stride)?;
            let report = attention_entropy(&model, &windows, cfg.entropy_phase)?;
            report.write(cfg.out_dir.join("entropy"))?;
            cfg.write_resolved(&cfg.out_dir)?;
            println!(
                "{}: average entropy {:.4} bits over {} windows at phase {} (max {:.4})",
                report.variant, report.average, report.windows, report.phase, report.max
            );
        }
    }
    Ok(())
}

pub fn export_embeddings(common: &Common, checkpoint: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let model = load_checkpoint(checkpoint, None)?;
    let dir = cfg.out_dir.join("embeddings");
    let paths = emaformer::diagnostics::export_embeddings(&model, &dir)?;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}
