//! Hourly load ingest, time-axis regularisation, gap interpolation, Min-Max
//! scaling, sliding windows and the chronological train/test split.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATETIME_FORMAT: &str = "%Y-%m-%d %H:%M:%S";
const HOUR: i64 = 3600;

/// One parsed CSV row. `timestamp` is seconds since the Unix epoch, read as
/// naive wall-clock time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawRecord {
    pub timestamp: i64,
    pub load_mw: f64,
}

pub fn parse_datetime(s: &str) -> Option<i64> {
    NaiveDateTime::parse_from_str(s.trim(), DATETIME_FORMAT)
        .ok()
        .map(|dt| dt.and_utc().timestamp())
}

pub fn format_datetime(ts: i64) -> String {
    DateTime::from_timestamp(ts, 0)
        .map(|dt| dt.naive_utc().format(DATETIME_FORMAT).to_string())
        .unwrap_or_else(|| ts.to_string())
}

/// Reads a `Datetime,<load>` CSV file. See [`read_records`].
pub fn load_csv(path: impl AsRef<Path>, column: Option<&str>) -> Result<Vec<RawRecord>> {
    let file = std::fs::File::open(path.as_ref())?;
    read_records(file, column)
}

/// Parses hourly load rows in file order. The first column is the timestamp;
/// the load is `column` when given, else the second column. Errors carry the
/// 1-based line number (the header is line 1).
pub fn read_records<R: Read>(reader: R, column: Option<&str>) -> Result<Vec<RawRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 {
        return Err(Error::Ingest {
            row: 1,
            message: "expected a header with a datetime and a load column".into(),
        });
    }
    let load_col = match column {
        Some(name) => headers.iter().position(|h| h == name).ok_or_else(|| Error::Ingest {
            row: 1,
            message: format!("no column named '{name}'"),
        })?,
        None => 1,
    };
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let ts_field = rec.get(0).unwrap_or("");
        let timestamp = parse_datetime(ts_field).ok_or_else(|| Error::Ingest {
            row: line,
            message: format!("unparseable datetime '{ts_field}'"),
        })?;
        let load_field = rec.get(load_col).unwrap_or("");
        let load_mw: f64 = load_field
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| Error::Ingest {
                row: line,
                message: format!("non-numeric load '{load_field}'"),
            })?;
        out.push(RawRecord { timestamp, load_mw });
    }
    if out.is_empty() {
        return Err(Error::Ingest {
            row: 1,
            message: "file has no data rows".into(),
        });
    }
    Ok(out)
}

/// Hourly load series on a regular one-hour grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub timestamps: Vec<i64>,
    pub values: Vec<f64>,
}

impl TimeSeries {
    /// Series starting at `start` with one value per hour.
    pub fn hourly(start: i64, values: Vec<f64>) -> Self {
        let timestamps = (0..values.len() as i64).map(|i| start + i * HOUR).collect();
        TimeSeries { timestamps, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Positions still holding a gap placeholder (NaN).
    pub fn gap_mask(&self) -> Vec<bool> {
        self.values.iter().map(|v| v.is_nan()).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["Datetime", "MW"])?;
        for (t, v) in self.timestamps.iter().zip(&self.values) {
            wtr.write_record([format_datetime(*t), v.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Output of [`regularize_hourly`]: gaps are NaN in `series.values`.
#[derive(Debug, Clone, PartialEq)]
pub struct Regularized {
    pub series: TimeSeries,
    pub gap_mask: Vec<bool>,
    /// Number of records folded into an earlier record with the same timestamp.
    pub duplicates_merged: usize,
}

impl Regularized {
    pub fn gap_count(&self) -> usize {
        self.gap_mask.iter().filter(|&&g| g).count()
    }
}

/// Sorts records, averages duplicate timestamps and reindexes onto the full
/// hourly grid between the first and last timestamp.
pub fn regularize_hourly(records: &[RawRecord]) -> Result<Regularized> {
    if records.len() < 2 {
        return Err(Error::TooShort {
            required: 2,
            actual: records.len(),
        });
    }
    let mut sorted = records.to_vec();
    sorted.sort_by_key(|r| r.timestamp);
    let first = sorted[0].timestamp;
    let last = sorted[sorted.len() - 1].timestamp;
    if first == last {
        return Err(Error::usage("all records share one timestamp; no time span"));
    }
    if let Some(r) = sorted.iter().find(|r| (r.timestamp - first) % HOUR != 0) {
        return Err(Error::usage(format!(
            "timestamp {} is not on the hourly grid",
            format_datetime(r.timestamp)
        )));
    }
    let n = ((last - first) / HOUR) as usize + 1;
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for r in &sorted {
        let i = ((r.timestamp - first) / HOUR) as usize;
        sums[i] += r.load_mw;
        counts[i] += 1;
    }
    let duplicates_merged = counts.iter().map(|&c| c.saturating_sub(1)).sum();
    let values: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
        .collect();
    let gap_mask = counts.iter().map(|&c| c == 0).collect();
    Ok(Regularized {
        series: TimeSeries::hourly(first, values),
        gap_mask,
        duplicates_merged,
    })
}

/// Fills NaN gaps linearly between the nearest observed neighbours.
pub fn interpolate_linear(series: &TimeSeries) -> Result<TimeSeries> {
    let v = &series.values;
    if v.is_empty() {
        return Err(Error::TooShort {
            required: 1,
            actual: 0,
        });
    }
    if v[0].is_nan() || v[v.len() - 1].is_nan() {
        return Err(Error::usage(
            "leading or trailing gap has no interpolation anchor",
        ));
    }
    let mut out = v.clone();
    let mut prev = 0;
    for i in 1..v.len() {
        if v[i].is_nan() {
            continue;
        }
        if i > prev + 1 {
            let (a, b) = (v[prev], v[i]);
            let span = (i - prev) as f64;
            for (k, slot) in out.iter_mut().enumerate().take(i).skip(prev + 1) {
                let w = (k - prev) as f64 / span;
                *slot = a + (b - a) * w;
            }
        }
        prev = i;
    }
    Ok(TimeSeries {
        timestamps: series.timestamps.clone(),
        values: out,
    })
}

/// Min-Max scaling bounds in MW.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub min: f64,
    pub max: f64,
}

impl ScalerParams {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(max > min) {
            return Err(Error::DegenerateScaler { min, max });
        }
        Ok(ScalerParams { min, max })
    }

    pub fn span(&self) -> f64 {
        self.max - self.min
    }

    /// `(x − min)/(max − min)`. Values outside the fit range land outside [0, 1].
    pub fn scale(&self, x: f64) -> f64 {
        (x - self.min) / self.span()
    }

    pub fn unscale(&self, s: f64) -> f64 {
        s * self.span() + self.min
    }

    pub fn transform(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.scale(x)).collect()
    }

    pub fn inverse_transform(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.unscale(x)).collect()
    }
}

/// Min/max of `values[fit_range]`.
pub fn fit_scaler(values: &[f64], fit_range: Range<usize>) -> Result<ScalerParams> {
    if fit_range.is_empty() || fit_range.end > values.len() {
        return Err(Error::usage(format!(
            "fit range {fit_range:?} invalid for {} values",
            values.len()
        )));
    }
    let slice = &values[fit_range];
    let min = slice.iter().copied().fold(f64::INFINITY, f64::min);
    let max = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ScalerParams::new(min, max)
}

/// Supervised `(input, target)` pairs cut from one series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowedDataset {
    pub input_len: usize,
    pub horizon: usize,
    /// Row-major `len × input_len`.
    pub inputs: Vec<f64>,
    /// Row-major `len × horizon`.
    pub targets: Vec<f64>,
    /// Source index of each window's first input value.
    pub origins: Vec<usize>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_len..(i + 1) * self.input_len]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * self.horizon..(i + 1) * self.horizon]
    }

    /// Copies the windows at `idx` (in that order).
    pub fn select(&self, idx: &[usize]) -> WindowedDataset {
        let mut out = WindowedDataset {
            input_len: self.input_len,
            horizon: self.horizon,
            inputs: Vec::with_capacity(idx.len() * self.input_len),
            targets: Vec::with_capacity(idx.len() * self.horizon),
            origins: Vec::with_capacity(idx.len()),
        };
        for &i in idx {
            out.inputs.extend_from_slice(self.input(i));
            out.targets.extend_from_slice(self.target(i));
            out.origins.push(self.origins[i]);
        }
        out
    }

    fn range(&self, r: Range<usize>) -> WindowedDataset {
        let idx: Vec<usize> = r.collect();
        self.select(&idx)
    }
}

/// Number of windows [`make_windows`] emits for a series of length `n`.
pub fn window_count(n: usize, input_len: usize, horizon: usize, stride: usize) -> usize {
    if stride == 0 || n < input_len + horizon {
        0
    } else {
        (n - input_len - horizon) / stride + 1
    }
}

/// Slides a window of `input_len + horizon` values over `series` with `stride`.
pub fn make_windows(
    series: &[f64],
    input_len: usize,
    horizon: usize,
    stride: usize,
) -> Result<WindowedDataset> {
    if input_len == 0 || horizon == 0 || stride == 0 {
        return Err(Error::usage("input_len, horizon and stride must be positive"));
    }
    let need = input_len + horizon;
    if series.len() < need {
        return Err(Error::TooShort {
            required: need,
            actual: series.len(),
        });
    }
    let count = window_count(series.len(), input_len, horizon, stride);
    let mut ds = WindowedDataset {
        input_len,
        horizon,
        inputs: Vec::with_capacity(count * input_len),
        targets: Vec::with_capacity(count * horizon),
        origins: Vec::with_capacity(count),
    };
    for k in 0..count {
        let o = k * stride;
        ds.inputs.extend_from_slice(&series[o..o + input_len]);
        ds.targets.extend_from_slice(&series[o + input_len..o + need]);
        ds.origins.push(o);
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: WindowedDataset,
    pub test: WindowedDataset,
    pub split_fraction: f64,
}

/// Number of leading windows assigned to training by [`chrono_split`].
pub fn train_window_count(n_windows: usize, fraction: f64) -> usize {
    (fraction * n_windows as f64).floor() as usize
}

/// First `⌊fraction·N⌋` windows (in origin order) train, the rest test.
pub fn chrono_split(ws: &WindowedDataset, fraction: f64) -> Result<SplitDataset> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::usage(format!("split fraction {fraction} outside (0, 1)")));
    }
    if ws.len() < 2 {
        return Err(Error::TooShort {
            required: 2,
            actual: ws.len(),
        });
    }
    let n_train = train_window_count(ws.len(), fraction);
    if n_train == 0 || n_train == ws.len() {
        return Err(Error::usage(format!(
            "fraction {fraction} leaves an empty side with {} windows",
            ws.len()
        )));
    }
    Ok(SplitDataset {
        train: ws.range(0..n_train),
        test: ws.range(n_train..ws.len()),
        split_fraction: fraction,
    })
}
