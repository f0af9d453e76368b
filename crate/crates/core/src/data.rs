//! CSV loading, chronological splits, z-score normalisation and sliding
//! windows tagged with their absolute-time phase.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound applied to every standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// Known benchmark layouts: channel count, usable length, sampling period.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetPreset {
    pub name: &'static str,
    pub channels: usize,
    pub steps: usize,
    /// Steps per day.
    pub daily_period: usize,
    pub split: (f64, f64, f64),
    /// Whether the weekly cycle is the better phase table size.
    pub prefer_weekly: bool,
}

impl DatasetPreset {
    pub fn weekly_period(&self) -> usize {
        7 * self.daily_period
    }

    pub fn default_period(&self) -> usize {
        if self.prefer_weekly {
            self.weekly_period()
        } else {
            self.daily_period
        }
    }
}

const ETT_SPLIT: (f64, f64, f64) = (0.6, 0.2, 0.2);
const STD_SPLIT: (f64, f64, f64) = (0.7, 0.1, 0.2);

pub const PRESETS: &[DatasetPreset] = &[
    DatasetPreset { name: "ETTh1", channels: 7, steps: 14_400, daily_period: 24, split: ETT_SPLIT, prefer_weekly: false },
    DatasetPreset { name: "ETTh2", channels: 7, steps: 14_400, daily_period: 24, split: ETT_SPLIT, prefer_weekly: false },
    DatasetPreset { name: "ETTm1", channels: 7, steps: 57_600, daily_period: 96, split: ETT_SPLIT, prefer_weekly: false },
    DatasetPreset { name: "ETTm2", channels: 7, steps: 57_600, daily_period: 96, split: ETT_SPLIT, prefer_weekly: false },
    DatasetPreset { name: "ECL", channels: 321, steps: 26_304, daily_period: 24, split: STD_SPLIT, prefer_weekly: true },
    DatasetPreset { name: "Solar", channels: 137, steps: 52_560, daily_period: 144, split: STD_SPLIT, prefer_weekly: false },
    DatasetPreset { name: "Traffic", channels: 862, steps: 17_544, daily_period: 24, split: STD_SPLIT, prefer_weekly: true },
    DatasetPreset { name: "Weather", channels: 21, steps: 52_696, daily_period: 144, split: STD_SPLIT, prefer_weekly: false },
    DatasetPreset { name: "PEMS03", channels: 358, steps: 26_208, daily_period: 288, split: ETT_SPLIT, prefer_weekly: false },
    DatasetPreset { name: "PEMS04", channels: 307, steps: 16_992, daily_period: 288, split: ETT_SPLIT, prefer_weekly: false },
    DatasetPreset { name: "PEMS07", channels: 883, steps: 28_224, daily_period: 288, split: ETT_SPLIT, prefer_weekly: false },
    DatasetPreset { name: "PEMS08", channels: 170, steps: 17_856, daily_period: 288, split: ETT_SPLIT, prefer_weekly: false },
];

/// Looks a preset up by case-insensitive name. `electricity` and
/// `solar_AL` are accepted as aliases.
pub fn preset(name: &str) -> Option<&'static DatasetPreset> {
    let key = match name.to_ascii_lowercase().as_str() {
        "electricity" => "ecl".to_string(),
        "solar_al" | "solar-energy" => "solar".to_string(),
        other => other.to_string(),
    };
    PRESETS.iter().find(|p| p.name.eq_ignore_ascii_case(&key))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesDataset {
    pub name: String,
    pub channel_names: Vec<String>,
    /// `[T × C]`, rows in file order.
    pub values: Tensor,
    /// Absolute step index of row 0.
    pub start_index: usize,
    pub period_daily: usize,
}

impl TimeSeriesDataset {
    pub fn new(name: impl Into<String>, values: Tensor, period_daily: usize) -> Result<Self> {
        let [_, c] = values.dims2("dataset")?;
        if c == 0 {
            return Err(Error::config("dataset", "no channels"));
        }
        if period_daily == 0 {
            return Err(Error::config("period", "must be positive"));
        }
        Ok(Self {
            name: name.into(),
            channel_names: (0..c).map(|i| format!("ch{i}")).collect(),
            values,
            start_index: 0,
            period_daily,
        })
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn period_weekly(&self) -> usize {
        7 * self.period_daily
    }

    pub fn preset(&self) -> Option<&'static DatasetPreset> {
        preset(&self.name)
    }

    /// Same metadata, replaced values (e.g. after normalisation).
    pub fn with_values(&self, values: Tensor) -> Result<Self> {
        if values.shape() != self.values.shape() {
            return Err(Error::dim(
                "with_values",
                format!("{:?} vs {:?}", values.shape(), self.values.shape()),
            ));
        }
        Ok(Self {
            values,
            ..self.clone()
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// The file has no leading timestamp column; every column is a channel.
    pub no_timestamp_column: bool,
    /// Keep at most this many rows. When unset, a matching preset's
    /// `steps` is used.
    pub max_rows: Option<usize>,
    /// Steps per day; falls back to the preset, then 24.
    pub period_daily: Option<usize>,
    pub start_index: usize,
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<TimeSeriesDataset> {
    load_csv_with(path, &LoadOptions::default())
}

pub fn load_csv_with(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<TimeSeriesDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let mut ds = parse_csv(file, &name, opts)?;
    let known = preset(&name);
    let limit = opts.max_rows.or(known.map(|p| p.steps));
    if let Some(limit) = limit {
        if ds.steps() > limit {
            log::info!("{name}: keeping the first {limit} of {} rows", ds.steps());
            let c = ds.channels();
            let kept = ds.values.data()[..limit * c].to_vec();
            ds.values = Tensor::new(&[limit, c], kept)?;
        }
    }
    ds.period_daily = match (opts.period_daily, known) {
        (Some(p), _) => p,
        (None, Some(p)) => p.daily_period,
        (None, None) => {
            log::warn!("{name}: unknown dataset, assuming 24 steps per day");
            24
        }
    };
    if ds.period_daily == 0 {
        return Err(Error::config("period", "must be positive"));
    }
    Ok(ds)
}

/// Parses CSV text with a header row. Row numbers in errors count data rows
/// from 1.
pub fn parse_csv<R: std::io::Read>(reader: R, name: &str, opts: &LoadOptions) -> Result<TimeSeriesDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let skip = usize::from(!opts.no_timestamp_column);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse { row: 0, reason: format!("header: {e}") })?
        .clone();
    if headers.len() <= skip {
        return Err(Error::Parse { row: 0, reason: "header has no channel columns".into() });
    }
    let channel_names: Vec<String> = headers.iter().skip(skip).map(str::to_string).collect();
    let c = channel_names.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse { row, reason: e.to_string() })?;
        if record.len() != c + skip {
            return Err(Error::Parse {
                row,
                reason: format!("expected {} columns, found {}", c + skip, record.len()),
            });
        }
        for (j, cell) in record.iter().skip(skip).enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                reason: format!("column `{}` value {cell:?} is not numeric", channel_names[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { row, reason: format!("column `{}` is not finite", channel_names[j]) });
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Parse { row: 1, reason: "file has no data rows".into() });
    }
    let values = Tensor::new(&[rows, c], data)?;
    let mut ds = TimeSeriesDataset::new(name, values, opts.period_daily.unwrap_or(24))?;
    ds.channel_names = channel_names;
    ds.start_index = opts.start_index;
    Ok(ds)
}

/// Row boundaries `[0, train_end)`, `[train_end, valid_end)`, `[valid_end, T)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub train_end: usize,
    pub valid_end: usize,
    pub total: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl SplitBounds {
    pub fn range(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.train_end,
            Split::Valid => self.train_end..self.valid_end,
            Split::Test => self.valid_end..self.total,
        }
    }
}

/// Cuts `steps` rows into train/valid/test spans. Train and test lengths are
/// `floor(T·ratio)`; validation takes the remainder.
pub fn chronological_split(
    steps: usize,
    ratios: (f64, f64, f64),
    lookback: usize,
    horizon: usize,
) -> Result<SplitBounds> {
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::config("split", format!("ratios {ratios:?} must be positive")));
    }
    if (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(Error::config("split", format!("ratios {ratios:?} must sum to 1")));
    }
    let floor = |r: f64| (steps as f64 * r + 1e-9).floor() as usize;
    let train_end = floor(tr);
    let test_len = floor(te);
    let valid_end = steps.saturating_sub(test_len);
    let need = lookback + horizon;
    let spans = [("train", train_end), ("valid", valid_end.saturating_sub(train_end)), ("test", test_len)];
    for (name, len) in spans {
        if len < need {
            return Err(Error::config(
                "split",
                format!("{name} span has {len} rows, fewer than lookback + horizon = {need}"),
            ));
        }
    }
    Ok(SplitBounds { train_end, valid_end, total: steps })
}

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fits on rows `[0, rows)` of `values` (the training span).
    pub fn fit(values: &Tensor, rows: usize) -> Result<Self> {
        let [t, c] = values.dims2("normalizer")?;
        if rows == 0 || rows > t {
            return Err(Error::Contract(format!("normaliser needs 1..={t} training rows, got {rows}")));
        }
        let mut mean = vec![0.0; c];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(values.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; c];
        for r in 0..rows {
            for ((s, v), m) in var.iter_mut().zip(values.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / rows as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, values: &Tensor) -> Result<Tensor> {
        self.map(values, |x, m, s| (x - m) / s)
    }

    pub fn invert(&self, values: &Tensor) -> Result<Tensor> {
        self.map(values, |x, m, s| x * s + m)
    }

    fn map(&self, values: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let c = values.last_dim();
        if c != self.mean.len() {
            return Err(Error::dim("normalizer", format!("{c} channels vs {} fitted", self.mean.len())));
        }
        let mut out = values.clone();
        for r in 0..out.outer_len() {
            for (j, x) in out.row_mut(r).iter_mut().enumerate() {
                *x = f(*x, self.mean[j], self.std[j]);
            }
        }
        Ok(out)
    }
}

/// One training or evaluation instance.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// `[L × C]` lookback.
    pub x: Tensor,
    /// `[H × C]` target, the rows right after `x`.
    pub y: Tensor,
    /// Absolute index of the last lookback row.
    pub t_last: usize,
    /// `t_last mod P`.
    pub phase: usize,
}

/// Sliding windows over one split, materialised on access.
///
/// A window's target lies wholly inside the split; its lookback may reach
/// back into the preceding span.
#[derive(Clone, Debug)]
pub struct WindowSet<'a> {
    values: &'a Tensor,
    start_index: usize,
    /// Row of the first target step of each window.
    target_starts: Vec<usize>,
    pub lookback: usize,
    pub horizon: usize,
    pub period: usize,
}

impl<'a> WindowSet<'a> {
    pub fn len(&self) -> usize {
        self.target_starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_starts.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn target_start(&self, i: usize) -> usize {
        self.target_starts[i]
    }

    pub fn t_last(&self, i: usize) -> usize {
        self.start_index + self.target_starts[i] - 1
    }

    pub fn phase(&self, i: usize) -> usize {
        self.t_last(i) % self.period
    }

    pub fn get(&self, i: usize) -> WindowSample {
        let s = self.target_starts[i];
        let c = self.channels();
        let data = self.values.data();
        let x = data[(s - self.lookback) * c..s * c].to_vec();
        let y = data[s * c..(s + self.horizon) * c].to_vec();
        let t_last = self.t_last(i);
        WindowSample {
            x: Tensor::new(&[self.lookback, c], x).expect("lookback shape"),
            y: Tensor::new(&[self.horizon, c], y).expect("target shape"),
            t_last,
            phase: t_last % self.period,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = WindowSample> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    /// Keeps only windows whose phase equals `phase`.
    pub fn filter_phase(&self, phase: usize) -> WindowSet<'a> {
        let mut out = self.clone();
        out.target_starts.retain(|&s| (self.start_index + s - 1) % self.period == phase);
        out
    }
}

pub fn make_windows<'a>(
    ds: &'a TimeSeriesDataset,
    bounds: &SplitBounds,
    split: Split,
    lookback: usize,
    horizon: usize,
    period: usize,
    stride: usize,
) -> Result<WindowSet<'a>> {
    for (key, v) in [("lookback", lookback), ("horizon", horizon), ("period", period), ("stride", stride)] {
        if v == 0 {
            return Err(Error::config(key, "must be positive"));
        }
    }
    if bounds.total != ds.steps() {
        return Err(Error::Contract(format!(
            "split bounds cover {} rows but dataset has {}",
            bounds.total,
            ds.steps()
        )));
    }
    let range = bounds.range(split);
    let first = range.start.max(lookback);
    let target_starts = if range.end >= horizon && first + horizon <= range.end {
        (first..=range.end - horizon).step_by(stride).collect()
    } else {
        Vec::new()
    };
    Ok(WindowSet {
        values: &ds.values,
        start_index: ds.start_index,
        target_starts,
        lookback,
        horizon,
        period,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(t: usize, c: usize) -> TimeSeriesDataset {
        let data = (0..t * c).map(|i| i as f64).collect();
        TimeSeriesDataset::new("ramp", Tensor::new(&[t, c], data).unwrap(), 24).unwrap()
    }

    #[test]
    fn parses_small_file_in_order() {
        let text = "date,a,b\n2020-01-01 00:00,1,2\n2020-01-01 01:00,3,4\r\n2020-01-01 02:00,5,6\n";
        let ds = parse_csv(text.as_bytes(), "tiny", &LoadOptions::default()).unwrap();
        assert_eq!(ds.values.shape(), &[3, 2]);
        assert_eq!(ds.values.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(ds.channel_names, ["a", "b"]);
    }

    #[test]
    fn non_numeric_cell_names_its_row() {
        let mut text = String::from("date,a\n");
        for i in 1..=6 {
            let cell = if i == 5 { "oops".to_string() } else { i.to_string() };
            text.push_str(&format!("t{i},{cell}\n"));
        }
        let err = parse_csv(text.as_bytes(), "bad", &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 5, .. }), "{err}");
    }

    #[test]
    fn ragged_and_empty_files_rejected() {
        let ragged = "date,a,b\nt,1,2\nt,3\n";
        assert!(matches!(
            parse_csv(ragged.as_bytes(), "r", &LoadOptions::default()),
            Err(Error::Parse { row: 2, .. })
        ));
        assert!(parse_csv("date,a\n".as_bytes(), "e", &LoadOptions::default()).is_err());
        assert!(parse_csv("".as_bytes(), "e", &LoadOptions::default()).is_err());
    }

    #[test]
    fn no_timestamp_column_reads_every_column() {
        let text = "a,b\n1,2\n3,4\n";
        let opts = LoadOptions { no_timestamp_column: true, ..Default::default() };
        let ds = parse_csv(text.as_bytes(), "solar", &opts).unwrap();
        assert_eq!(ds.channels(), 2);
    }

    #[test]
    fn split_examples() {
        assert_eq!(
            chronological_split(100, (0.6, 0.2, 0.2), 4, 4).unwrap(),
            SplitBounds { train_end: 60, valid_end: 80, total: 100 }
        );
        let ett = chronological_split(14_400, (0.6, 0.2, 0.2), 96, 96).unwrap();
        assert_eq!((ett.train_end, ett.valid_end), (8640, 11520));
        assert!(matches!(
            chronological_split(10, (0.7, 0.1, 0.2), 8, 4),
            Err(Error::Config { .. })
        ));
        assert!(chronological_split(100, (0.6, 0.2, 0.3), 1, 1).is_err());
    }

    #[test]
    fn normalizer_examples() {
        let t = Tensor::from_rows(&[[0.0, 5.0], [2.0, 5.0]]).unwrap();
        let n = Normalizer::fit(&t, 2).unwrap();
        assert_eq!(n.mean, vec![1.0, 5.0]);
        assert_eq!(n.std, vec![1.0, STD_FLOOR]);
        assert_eq!(n.apply(&t).unwrap().data(), &[-1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn normalizer_uses_only_training_rows() {
        // Drifting series: later rows are larger.
        let data: Vec<f64> = (0..50).map(|i| i as f64 * 0.5 + (i as f64).sin()).collect();
        let t = Tensor::new(&[50, 1], data).unwrap();
        let train = Normalizer::fit(&t, 30).unwrap();
        let all = Normalizer::fit(&t, 50).unwrap();
        assert!((train.mean[0] - all.mean[0]).abs() > 1.0);
        assert!(Normalizer::fit(&t, 0).is_err());
    }

    #[test]
    fn phase_examples() {
        let mut ds = ramp(200, 2);
        let b = SplitBounds { train_end: 150, valid_end: 175, total: 200 };
        let w = make_windows(&ds, &b, Split::Train, 10, 5, 24, 1).unwrap();
        // target start 101 → t_last 100 → phase 4
        let i = (0..w.len()).find(|&i| w.t_last(i) == 100).unwrap();
        assert_eq!(w.get(i).phase, 4);
        let j = (0..w.len()).find(|&i| w.t_last(i) == 24).unwrap();
        assert_eq!(w.get(j).phase, 0);
        assert_eq!(w.phase(i), w.phase(i + 24));

        ds.start_index = 3;
        let w = make_windows(&ds, &b, Split::Train, 10, 5, 24, 1).unwrap();
        assert_eq!(w.get(0).t_last, 3 + 9);
    }

    #[test]
    fn windows_respect_split_edges() {
        let ds = ramp(100, 3);
        let b = chronological_split(100, (0.6, 0.2, 0.2), 8, 4).unwrap();
        for split in [Split::Train, Split::Valid, Split::Test] {
            let w = make_windows(&ds, &b, split, 8, 4, 24, 1).unwrap();
            let r = b.range(split);
            assert!(!w.is_empty());
            for i in 0..w.len() {
                let s = w.target_start(i);
                assert!(s >= r.start && s + 4 <= r.end);
                let sample = w.get(i);
                // x rows immediately precede y rows: the ramp increments by C per row.
                assert_eq!(sample.y.at(&[0, 0]) - sample.x.at(&[7, 0]), 3.0);
            }
        }
        let train = make_windows(&ds, &b, Split::Train, 8, 4, 24, 1).unwrap();
        assert_eq!(train.len(), 60 - 8 - 4 + 1);
        let test = make_windows(&ds, &b, Split::Test, 8, 4, 24, 1).unwrap();
        assert_eq!(test.len(), 20 - 4 + 1);
        let strided = make_windows(&ds, &b, Split::Train, 8, 4, 24, 5).unwrap();
        assert_eq!(strided.len(), (60 - 12) / 5 + 1);
    }

    #[test]
    fn short_split_yields_no_windows() {
        let ds = ramp(30, 1);
        let b = SplitBounds { train_end: 10, valid_end: 20, total: 30 };
        let w = make_windows(&ds, &b, Split::Train, 8, 4, 24, 1).unwrap();
        assert!(w.is_empty());
    }

    #[test]
    fn phases_cover_period_once() {
        let ds = ramp(300, 1);
        let b = SplitBounds { train_end: 200, valid_end: 250, total: 300 };
        let w = make_windows(&ds, &b, Split::Train, 12, 3, 24, 1).unwrap();
        for start in [0, 5, 40] {
            let mut seen: Vec<usize> = (start..start + 24).map(|i| w.phase(i)).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..24).collect::<Vec<_>>());
        }
        let p0 = w.filter_phase(0);
        assert!(p0.iter().all(|s| s.phase == 0));
        assert_eq!(p0.len(), (0..w.len()).filter(|&i| w.phase(i) == 0).count());
    }

    #[test]
    fn preset_lookup() {
        let p = preset("etth1").unwrap();
        assert_eq!((p.channels, p.steps, p.daily_period), (7, 14_400, 24));
        assert_eq!(preset("electricity").unwrap().default_period(), 168);
        assert_eq!(preset("Weather").unwrap().default_period(), 144);
        assert!(preset("mystery").is_none());
    }
}
