//! Inter-channel correlation stability and attention entropy analyses, plus
//! embedding table export.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::WindowSet;
use crate::encoder::AttentionRecord;
use crate::error::{Error, Result};
use crate::model::EmaFormer;
use crate::tensor::Tensor;

/// Means below this magnitude make the coefficient of variation unbounded.
pub const ZERO_MEAN: f64 = 1e-12;

/// One Pearson matrix per complete day of `values` (`[T × C]`). Entries
/// involving a channel that is constant within the day are NaN; a trailing
/// partial day is dropped.
pub fn daily_correlations(values: &Tensor, day_len: usize) -> Result<Vec<Tensor>> {
    let [t, c] = values.dims2("daily_correlations")?;
    if day_len < 2 {
        return Err(Error::config("day_len", format!("{day_len} is shorter than 2 steps")));
    }
    let days = t / day_len;
    if days < 2 {
        return Err(Error::Contract(format!(
            "{t} rows hold {days} complete day(s) of {day_len} steps; at least 2 are needed"
        )));
    }
    Ok((0..days).map(|n| day_pearson(values, n * day_len, day_len, c)).collect())
}

fn day_pearson(values: &Tensor, start: usize, len: usize, c: usize) -> Tensor {
    let column = |j: usize| -> Vec<f64> { (start..start + len).map(|r| values.row(r)[j]).collect() };
    let centred: Vec<Option<Vec<f64>>> = (0..c)
        .map(|j| {
            let col = column(j);
            let mean = col.iter().sum::<f64>() / len as f64;
            let dev: Vec<f64> = col.iter().map(|v| v - mean).collect();
            let spread = (dev.iter().map(|d| d * d).sum::<f64>() / len as f64).sqrt();
            let scale = col.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
            (spread > 1e-12 * scale).then_some(dev)
        })
        .collect();
    let mut r = Tensor::full(&[c, c], f64::NAN);
    for i in 0..c {
        for j in i..c {
            if let (Some(a), Some(b)) = (&centred[i], &centred[j]) {
                let v = if i == j {
                    1.0
                } else {
                    let num: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    let den = (a.iter().map(|x| x * x).sum::<f64>() * b.iter().map(|y| y * y).sum::<f64>()).sqrt();
                    (num / den).clamp(-1.0, 1.0)
                };
                r.data_mut()[i * c + j] = v;
                r.data_mut()[j * c + i] = v;
            }
        }
    }
    r
}

/// Per-pair statistics of daily correlations. `None` marks pairs with fewer
/// than two valid days; in `cov` it also marks flagged near-zero means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovReport {
    pub channels: usize,
    pub days: usize,
    pub mean: Vec<Vec<Option<f64>>>,
    pub std: Vec<Vec<Option<f64>>>,
    pub cov: Vec<Vec<Option<f64>>>,
    pub valid_days: Vec<Vec<usize>>,
    /// `|mean| < 1e-12`: the ratio is reported as infinite.
    pub infinite: Vec<Vec<bool>>,
}

impl CovReport {
    /// Largest finite off-diagonal coefficient, with its pair.
    pub fn max_off_diagonal(&self) -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..self.channels {
            for j in 0..self.channels {
                if let (true, Some(v)) = (i != j, self.cov[i][j]) {
                    if best.is_none_or(|b| v > b.2) {
                        best = Some((i, j, v));
                    }
                }
            }
        }
        best
    }

    /// Off-diagonal pairs (i < j) with a coefficient above `threshold`,
    /// counting flagged infinite pairs.
    pub fn pairs_above(&self, threshold: f64) -> usize {
        let mut n = 0;
        for i in 0..self.channels {
            for j in i + 1..self.channels {
                if self.infinite[i][j] || self.cov[i][j].is_some_and(|v| v > threshold) {
                    n += 1;
                }
            }
        }
        n
    }

    pub fn all_invalid(&self) -> bool {
        self.valid_days.iter().flatten().all(|&n| n < 2)
    }

    /// Writes `cov_report.json` and `mean.csv`, `std.csv`, `cov.csv`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("cov_report.json");
        fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))?;
        let mut paths = vec![json];
        let cov_cells: Vec<Vec<String>> = (0..self.channels)
            .map(|i| {
                (0..self.channels)
                    .map(|j| if self.infinite[i][j] { "inf".into() } else { cell(self.cov[i][j]) })
                    .collect()
            })
            .collect();
        for (name, cells) in [
            ("mean.csv", to_cells(&self.mean)),
            ("std.csv", to_cells(&self.std)),
            ("cov.csv", cov_cells),
        ] {
            let path = dir.join(name);
            write_rows(&path, &cells)?;
            paths.push(path);
        }
        Ok(paths)
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), |x| x.to_string())
}

fn to_cells(m: &[Vec<Option<f64>>]) -> Vec<Vec<String>> {
    m.iter().map(|row| row.iter().map(|v| cell(*v)).collect()).collect()
}

fn write_rows(path: &Path, rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::io(path, e.into()))?;
    for row in rows {
        w.write_record(row).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean, population standard deviation and coefficient of variation of each
/// entry across days, skipping days where the entry is invalid.
pub fn cov_matrix(daily: &[Tensor]) -> Result<CovReport> {
    if daily.len() < 2 {
        return Err(Error::Contract(format!("{} day(s) of correlations; at least 2 are needed", daily.len())));
    }
    let [c, c2] = daily[0].dims2("cov_matrix")?;
    if c != c2 || daily.iter().any(|d| d.shape() != [c, c]) {
        return Err(Error::dim("cov_matrix", "daily matrices must all be C×C"));
    }
    let mut report = CovReport {
        channels: c,
        days: daily.len(),
        mean: vec![vec![None; c]; c],
        std: vec![vec![None; c]; c],
        cov: vec![vec![None; c]; c],
        valid_days: vec![vec![0; c]; c],
        infinite: vec![vec![false; c]; c],
    };
    for i in 0..c {
        for j in 0..c {
            let vals: Vec<f64> = daily.iter().map(|d| d.data()[i * c + j]).filter(|v| !v.is_nan()).collect();
            let n = vals.len();
            report.valid_days[i][j] = n;
            if n < 2 {
                continue;
            }
            let mean = vals.iter().sum::<f64>() / n as f64;
            let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
            report.mean[i][j] = Some(mean);
            report.std[i][j] = Some(std);
            if mean.abs() < ZERO_MEAN {
                report.infinite[i][j] = true;
            } else {
                report.cov[i][j] = Some(std / mean);
            }
        }
    }
    Ok(report)
}

/// Steps per day for a sampling interval in minutes.
pub fn day_len_for_minutes(minutes: usize) -> Option<usize> {
    (minutes > 0 && 1440 % minutes == 0).then(|| 1440 / minutes)
}

/// `−Σ p log₂ p` with `0 · log 0 = 0`.
pub fn row_entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|p| **p > 0.0).map(|p| p * p.log2()).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub variant: String,
    pub phase: usize,
    pub period: usize,
    pub windows: usize,
    pub channels: usize,
    /// Row entropies of the head-averaged attention, averaged over windows.
    pub row_entropy: Vec<f64>,
    pub average: f64,
    pub max: f64,
}

impl EntropyReport {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("entropy_report.json");
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Per-row entropies averaged over records, and their overall mean.
pub fn entropy_of_records(records: &[AttentionRecord]) -> Result<(Vec<f64>, f64)> {
    let first = records.first().ok_or_else(|| Error::Contract("no attention records".into()))?;
    let c = first.mean.len();
    let mut rows = vec![0.0; c];
    for r in records {
        if r.mean.len() != c {
            return Err(Error::dim("entropy", "records disagree on token count"));
        }
        for (acc, row) in rows.iter_mut().zip(&r.mean) {
            *acc += row_entropy(row);
        }
    }
    rows.iter_mut().for_each(|v| *v /= records.len() as f64);
    let avg = rows.iter().sum::<f64>() / c as f64;
    Ok((rows, avg))
}

/// Entropy of the last layer's head-averaged attention over every window of
/// `windows` whose last lookback step has the given phase.
pub fn attention_entropy(model: &EmaFormer, windows: &WindowSet<'_>, phase: usize) -> Result<EntropyReport> {
    let period = windows.period;
    let selected = windows.filter_phase(phase);
    if selected.is_empty() {
        return Err(Error::Contract(format!(
            "no window at phase {phase} (period {period}) among {} windows",
            windows.len()
        )));
    }
    let mut records = Vec::with_capacity(selected.len());
    for chunk in (0..selected.len()).collect::<Vec<_>>().chunks(64) {
        let samples: Vec<_> = chunk.iter().map(|&i| selected.get(i)).collect();
        let xs: Vec<&Tensor> = samples.iter().map(|s| &s.x).collect();
        let ts: Vec<usize> = samples.iter().map(|s| s.t_last).collect();
        records.extend(model.attention(&xs, &ts)?);
    }
    let (row_entropy, average) = entropy_of_records(&records)?;
    let channels = row_entropy.len();
    Ok(EntropyReport {
        variant: model.config().variant_tag(),
        phase,
        period,
        windows: records.len(),
        channels,
        row_entropy,
        average,
        max: (channels as f64).log2(),
    })
}

/// Writes the channel table, the phase table and one `[P × d]` slice of the
/// joint table per channel as headerless CSV. Returns the written paths.
pub fn export_embeddings(model: &EmaFormer, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = model.config();
    let tables = model.embeddings();
    let params = model.params();
    let mut paths = Vec::new();
    let mut emit = |name: String, rows: &mut dyn Iterator<Item = &[f64]>| -> Result<()> {
        let path = dir.join(name);
        let cells: Vec<Vec<String>> = rows.map(|r| r.iter().map(|v| v.to_string()).collect()).collect();
        write_rows(&path, &cells)?;
        paths.push(path);
        Ok(())
    };
    let channel = params.get(tables.channel);
    emit("channel.csv".into(), &mut (0..cfg.channels).map(|i| channel.row(i)))?;
    let phase = params.get(tables.phase);
    emit("phase.csv".into(), &mut (0..cfg.period).map(|p| phase.row(p)))?;
    let joint = params.get(tables.joint);
    for i in 0..cfg.channels {
        emit(format!("joint_channel{i}.csv"), &mut (0..cfg.period).map(|p| joint.row(i * cfg.period + p)))?;
    }
    Ok(paths)
}

/// Reads a headerless numeric CSV back into a `[rows × cols]` tensor.
pub fn read_table(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::io(path, e.into()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse { row: i + 1, reason: e.to_string() })?;
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Parse { row: i + 1, reason: format!("`{s}`: {e}") }))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Tensor::from_rows(&rows)
}
