//! Series frames, CSV I/O, covariates, windowing, scaling and augmentation.

use std::f64::consts::PI;
use std::path::Path;

use chrono::{Datelike, NaiveDate, NaiveDateTime, TimeDelta, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{ManfError, Result};
use crate::rng::Rng;

/// Means below this magnitude are replaced by 1.
pub const SCALE_FLOOR: f64 = 1e-8;
pub const AR1_COEF: f64 = 0.8;
const TS_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Freq {
    HalfHourly,
    Hourly,
    Daily,
}

impl Freq {
    pub fn step(self) -> TimeDelta {
        match self {
            Freq::HalfHourly => TimeDelta::minutes(30),
            Freq::Hourly => TimeDelta::hours(1),
            Freq::Daily => TimeDelta::days(1),
        }
    }

    fn from_step(step: TimeDelta) -> Option<Self> {
        [Freq::HalfHourly, Freq::Hourly, Freq::Daily]
            .into_iter()
            .find(|f| f.step() == step)
    }

    pub fn num_features(self) -> usize {
        match self {
            Freq::HalfHourly => 4,
            Freq::Hourly | Freq::Daily => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Freq::HalfHourly => "30-min",
            Freq::Hourly => "hourly",
            Freq::Daily => "daily",
        }
    }
}

/// A `T × D` multivariate series on a regular grid. Missing cells hold 0
/// and are flagged false in `observed`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFrame {
    pub freq: Freq,
    pub start: NaiveDateTime,
    dims: usize,
    values: Vec<f64>,
    observed: Vec<bool>,
    pub static_cats: Option<Vec<usize>>,
}

impl SeriesFrame {
    pub fn new(freq: Freq, start: NaiveDateTime, dims: usize, values: Vec<f64>, observed: Vec<bool>) -> Result<Self> {
        if dims == 0 {
            return Err(ManfError::Empty("series frame has no series".into()));
        }
        if values.is_empty() || values.len() % dims != 0 || observed.len() != values.len() {
            return Err(ManfError::shape("series_frame", &[values.len()], &[observed.len(), dims]));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ManfError::Format {
                row: i / dims,
                msg: "non-finite value".into(),
            });
        }
        let mut frame = SeriesFrame {
            freq,
            start,
            dims,
            values,
            observed,
            static_cats: None,
        };
        frame.zero_missing();
        Ok(frame)
    }

    /// A fully observed frame.
    pub fn dense(freq: Freq, start: NaiveDateTime, dims: usize, values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(freq, start, dims, values, vec![true; n])
    }

    fn zero_missing(&mut self) {
        for (v, &o) in self.values.iter_mut().zip(&self.observed) {
            if !o {
                *v = 0.0;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dims
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn value(&self, t: usize, d: usize) -> f64 {
        self.values[t * self.dims + d]
    }

    pub fn timestamp(&self, t: usize) -> NaiveDateTime {
        self.start + self.freq.step() * t as i32
    }

    pub fn missing_fraction(&self) -> f64 {
        self.observed.iter().filter(|&&o| !o).count() as f64 / self.observed.len() as f64
    }

    /// Rows `[0, end)`.
    pub fn head(&self, end: usize) -> Result<SeriesFrame> {
        if end == 0 || end > self.len() {
            return Err(ManfError::Index { index: end, len: self.len() });
        }
        let n = end * self.dims;
        let mut f = Self::new(self.freq, self.start, self.dims, self.values[..n].to_vec(), self.observed[..n].to_vec())?;
        f.static_cats = self.static_cats.clone();
        Ok(f)
    }

    /// Multiplies every value by `c`.
    pub fn scaled(&self, c: f64) -> SeriesFrame {
        let mut f = self.clone();
        f.values.iter_mut().for_each(|v| *v *= c);
        f
    }

    /// Cuts the window starting at `start` with `context` past and
    /// `horizon` future rows.
    pub fn window(&self, start: usize, context: usize, horizon: usize) -> Result<Window> {
        let end = start + context + horizon;
        if context == 0 || horizon == 0 || end > self.len() {
            return Err(ManfError::Coverage(format!(
                "window [{start}, {end}) exceeds series of length {}",
                self.len()
            )));
        }
        let d = self.dims;
        let mid = start + context;
        let feats = time_features(self, start..end);
        let c = self.freq.num_features();
        Ok(Window {
            start,
            context_len: context,
            horizon,
            dims: d,
            covariates: c,
            context: self.values[start * d..mid * d].to_vec(),
            observed: self.observed[start * d..mid * d].to_vec(),
            context_covs: feats[..context * c].to_vec(),
            future_covs: feats[context * c..].to_vec(),
            future: self.values[mid * d..end * d].to_vec(),
        })
    }
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    NaiveDateTime::parse_from_str(s, TS_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M"))
        .ok()
        .or_else(|| NaiveDate::parse_from_str(s, "%Y-%m-%d").ok().and_then(|d| d.and_hms_opt(0, 0, 0)))
}

/// Reads `timestamp,series_0,…,series_{D−1}`; empty cells are missing.
/// Line numbers in errors are 1-based and count the header.
pub fn load_csv(path: &Path) -> Result<SeriesFrame> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let dims = reader.headers()?.len().saturating_sub(1);
    if dims == 0 {
        return Err(ManfError::Empty(format!("{}: no series columns", path.display())));
    }
    let mut stamps = Vec::new();
    let mut values = Vec::new();
    let mut observed = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        if rec.len() != dims + 1 {
            return Err(ManfError::Format {
                row,
                msg: format!("expected {} fields, found {}", dims + 1, rec.len()),
            });
        }
        let ts = parse_timestamp(&rec[0]).ok_or_else(|| ManfError::Format {
            row,
            msg: format!("bad timestamp {:?}", &rec[0]),
        })?;
        stamps.push(ts);
        for cell in rec.iter().skip(1) {
            let cell = cell.trim();
            if cell.is_empty() {
                values.push(0.0);
                observed.push(false);
            } else {
                let v: f64 = cell.parse().map_err(|_| ManfError::Format {
                    row,
                    msg: format!("bad value {cell:?}"),
                })?;
                if !v.is_finite() {
                    return Err(ManfError::Format { row, msg: "non-finite value".into() });
                }
                values.push(v);
                observed.push(true);
            }
        }
    }
    if stamps.is_empty() {
        return Err(ManfError::Empty(format!("{}: no rows", path.display())));
    }
    let freq = if stamps.len() == 1 {
        Freq::Hourly
    } else {
        Freq::from_step(stamps[1] - stamps[0]).ok_or_else(|| ManfError::Format {
            row: 3,
            msg: format!("unsupported frequency {}", stamps[1] - stamps[0]),
        })?
    };
    for (i, w) in stamps.windows(2).enumerate() {
        if w[1] - w[0] != freq.step() {
            return Err(ManfError::Format {
                row: i + 3,
                msg: format!("irregular timestamp {} after {}", w[1], w[0]),
            });
        }
    }
    SeriesFrame::new(freq, stamps[0], dims, values, observed)
}

pub fn write_csv(frame: &SeriesFrame, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["timestamp".to_string()];
    header.extend((0..frame.dims).map(|d| format!("series_{d}")));
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(frame.dims + 1);
    for t in 0..frame.len() {
        row.clear();
        row.push(frame.timestamp(t).format(TS_FORMAT).to_string());
        for d in 0..frame.dims {
            let i = t * frame.dims + d;
            row.push(if frame.observed[i] {
                frame.values[i].to_string()
            } else {
                String::new()
            });
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Calendar features in `[−0.5, 0.5]`, row-major `len × C`.
pub fn time_features(frame: &SeriesFrame, range: std::ops::Range<usize>) -> Vec<f64> {
    let mut out = Vec::with_capacity(range.len() * frame.freq.num_features());
    for t in range {
        let ts = frame.timestamp(t);
        let dow = ts.weekday().num_days_from_monday() as f64 / 6.0 - 0.5;
        let dom = ts.day0() as f64 / 30.0 - 0.5;
        match frame.freq {
            Freq::Daily => out.extend([dow, dom, ts.month0() as f64 / 11.0 - 0.5]),
            f => {
                out.extend([ts.hour() as f64 / 23.0 - 0.5, dow, dom]);
                if f == Freq::HalfHourly {
                    out.push(ts.minute() as f64 / 59.0 - 0.5);
                }
            }
        }
    }
    out
}

/// One raw (unscaled) forecasting window.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub start: usize,
    pub context_len: usize,
    pub horizon: usize,
    pub dims: usize,
    pub covariates: usize,
    /// `L × D`, zero where unobserved.
    pub context: Vec<f64>,
    pub observed: Vec<bool>,
    /// `L × C`.
    pub context_covs: Vec<f64>,
    /// `k × C`.
    pub future_covs: Vec<f64>,
    /// `k × D`.
    pub future: Vec<f64>,
}

/// Per-series mean of `|x|` over observed context cells; magnitudes below
/// [`SCALE_FLOOR`] (including fully unobserved series) fall back to 1.
pub fn window_means(context: &[f64], observed: &[bool], dims: usize) -> Vec<f64> {
    let mut sum = vec![0.0; dims];
    let mut count = vec![0usize; dims];
    for (i, (&v, &o)) in context.iter().zip(observed).enumerate() {
        if o {
            sum[i % dims] += v.abs();
            count[i % dims] += 1;
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(&s, &c)| {
            let m = if c == 0 { 0.0 } else { s / c as f64 };
            if m.abs() < SCALE_FLOOR {
                1.0
            } else {
                m
            }
        })
        .collect()
}

/// Divides each column of the row-major `x` by `means`.
pub fn mean_scale(x: &[f64], means: &[f64]) -> Vec<f64> {
    let d = means.len();
    x.iter().enumerate().map(|(i, v)| v / means[i % d]).collect()
}

pub fn unscale(x: &[f64], means: &[f64]) -> Vec<f64> {
    let d = means.len();
    x.iter().enumerate().map(|(i, v)| v * means[i % d]).collect()
}

/// Stacked, mean-scaled windows ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub size: usize,
    pub context_len: usize,
    pub horizon: usize,
    pub dims: usize,
    pub covariates: usize,
    /// `B × L × D`, scaled, zero where unobserved.
    pub context: Vec<f64>,
    /// `B × L × D` observed indicator (1/0).
    pub observed: Vec<f64>,
    pub context_covs: Vec<f64>,
    pub future_covs: Vec<f64>,
    /// `B × k × D`, scaled.
    pub future: Vec<f64>,
    /// `B × D`.
    pub means: Vec<f64>,
}

impl WindowBatch {
    pub fn from_windows(ws: &[Window]) -> Result<Self> {
        let first = ws.first().ok_or_else(|| ManfError::Empty("window batch".into()))?;
        let (l, k, d, c) = (first.context_len, first.horizon, first.dims, first.covariates);
        let mut b = WindowBatch {
            size: ws.len(),
            context_len: l,
            horizon: k,
            dims: d,
            covariates: c,
            context: Vec::with_capacity(ws.len() * l * d),
            observed: Vec::with_capacity(ws.len() * l * d),
            context_covs: Vec::with_capacity(ws.len() * l * c),
            future_covs: Vec::with_capacity(ws.len() * k * c),
            future: Vec::with_capacity(ws.len() * k * d),
            means: Vec::with_capacity(ws.len() * d),
        };
        for w in ws {
            if (w.context_len, w.horizon, w.dims, w.covariates) != (l, k, d, c) {
                return Err(ManfError::shape(
                    "window_batch",
                    &[l, k, d, c],
                    &[w.context_len, w.horizon, w.dims, w.covariates],
                ));
            }
            let means = window_means(&w.context, &w.observed, d);
            b.context.extend(mean_scale(&w.context, &means));
            b.observed.extend(w.observed.iter().map(|&o| if o { 1.0 } else { 0.0 }));
            b.context_covs.extend_from_slice(&w.context_covs);
            b.future_covs.extend_from_slice(&w.future_covs);
            b.future.extend(mean_scale(&w.future, &means));
            b.means.extend(means);
        }
        Ok(b)
    }

    /// The batch with every window repeated `times` times, in order.
    pub fn repeated(&self, times: usize) -> WindowBatch {
        fn rep(v: &[f64], times: usize) -> Vec<f64> {
            v.repeat(times)
        }
        WindowBatch {
            size: self.size * times,
            context: rep(&self.context, times),
            observed: rep(&self.observed, times),
            context_covs: rep(&self.context_covs, times),
            future_covs: rep(&self.future_covs, times),
            future: rep(&self.future, times),
            means: rep(&self.means, times),
            ..*self
        }
    }
}

/// How [`make_windows`] places windows.
#[derive(Debug, Clone, Copy)]
pub enum Sampling {
    /// `count` uniformly random starts with the window ending at or before `limit`.
    Train { count: usize, limit: usize },
    /// Non-overlapping rolling windows from the tail, spaced by `stride`,
    /// at most `max` of them, returned in time order.
    Eval { stride: usize, max: usize },
}

/// Start indices of tail-anchored evaluation windows.
pub fn eval_starts(len: usize, context: usize, horizon: usize, stride: usize, max: usize) -> Result<Vec<usize>> {
    let span = context + horizon;
    if span > len || stride == 0 || max == 0 {
        return Err(ManfError::Coverage(format!(
            "series of length {len} cannot hold a {context}+{horizon} window"
        )));
    }
    let last = len - span;
    let mut starts: Vec<usize> = (0..max)
        .map_while(|j| last.checked_sub(j * stride))
        .collect();
    starts.reverse();
    Ok(starts)
}

pub fn make_windows(frame: &SeriesFrame, context: usize, horizon: usize, sampling: Sampling, rng: &mut Rng) -> Result<Vec<Window>> {
    let span = context + horizon;
    let starts = match sampling {
        Sampling::Train { count, limit } => {
            let limit = limit.min(frame.len());
            if span > limit {
                return Err(ManfError::Coverage(format!(
                    "training range of length {limit} cannot hold a {context}+{horizon} window"
                )));
            }
            (0..count).map(|_| rng.below(limit - span + 1)).collect()
        }
        Sampling::Eval { stride, max } => eval_starts(frame.len(), context, horizon, stride, max)?,
    };
    starts
        .into_iter()
        .map(|s| frame.window(s, context, horizon))
        .collect()
}

/// Table-3 style stress settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionSpec {
    pub horizon_multiplier: usize,
    pub missing_fraction: f64,
    pub seed: u64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        CorruptionSpec {
            horizon_multiplier: 1,
            missing_fraction: 0.0,
            seed: 0,
        }
    }
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.missing_fraction) {
            return Err(ManfError::Contract(format!(
                "missing fraction {} not in [0, 1)",
                self.missing_fraction
            )));
        }
        if self.horizon_multiplier == 0 {
            return Err(ManfError::Contract("horizon multiplier must be positive".into()));
        }
        Ok(())
    }
}

/// Masks `round(fraction · T · D)` cells chosen uniformly without
/// replacement. Callers take only context rows from the result.
pub fn inject_missing(frame: &SeriesFrame, fraction: f64, rng: &mut Rng) -> Result<SeriesFrame> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(ManfError::Contract(format!("missing fraction {fraction} not in [0, 1)")));
    }
    let mut out = frame.clone();
    let n = out.values.len();
    let m = (fraction * n as f64).round() as usize;
    // partial Fisher–Yates: the first m entries of idx are a uniform m-subset
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
        out.observed[idx[i]] = false;
    }
    out.zero_missing();
    Ok(out)
}

/// Mixup with `λ ~ Beta(α, α)` per window, partner drawn by a random
/// permutation. `alpha = 0` disables it.
pub fn mixup(batch: &WindowBatch, alpha: f64, rng: &mut Rng) -> Result<WindowBatch> {
    if alpha < 0.0 {
        return Err(ManfError::Contract(format!("mixup alpha {alpha} is negative")));
    }
    if alpha == 0.0 || batch.size < 2 {
        return Ok(batch.clone());
    }
    let perm = rng.permutation(batch.size);
    let lambdas: Vec<f64> = (0..batch.size).map(|_| rng.beta(alpha, alpha)).collect();
    mixup_with(batch, &lambdas, &perm)
}

/// Mixup with explicit weights and partners; covariates and means come from
/// the first window of each pair, and a cell counts as observed only if it
/// is observed in both.
pub fn mixup_with(batch: &WindowBatch, lambdas: &[f64], partners: &[usize]) -> Result<WindowBatch> {
    if lambdas.len() != batch.size || partners.len() != batch.size {
        return Err(ManfError::shape("mixup", &[batch.size], &[lambdas.len(), partners.len()]));
    }
    let mut out = batch.clone();
    let ctx = batch.context_len * batch.dims;
    let fut = batch.horizon * batch.dims;
    for (i, (&lam, &j)) in lambdas.iter().zip(partners).enumerate() {
        for c in 0..ctx {
            let (a, b) = (i * ctx + c, j * ctx + c);
            let obs = batch.observed[a] * batch.observed[b];
            out.observed[a] = obs;
            out.context[a] = obs * (lam * batch.context[a] + (1.0 - lam) * batch.context[b]);
        }
        for c in 0..fut {
            let (a, b) = (i * fut + c, j * fut + c);
            out.future[a] = lam * batch.future[a] + (1.0 - lam) * batch.future[b];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    SinusoidMix,
    RandomWalk,
    Ar1,
}

impl std::str::FromStr for SynthKind {
    type Err = ManfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinusoid-mix" => Ok(SynthKind::SinusoidMix),
            "random-walk" => Ok(SynthKind::RandomWalk),
            "ar1" => Ok(SynthKind::Ar1),
            _ => Err(ManfError::Contract(format!("unknown synthetic kind {s:?}"))),
        }
    }
}

/// Hourly synthetic frame starting 2020-01-01.
///
/// * `sinusoid-mix`: per-series daily (24 h) and half-day harmonics with
///   random amplitudes/phases, an optional weekly term of relative size
///   `weekly`, plus `N(0, noise²)`, shifted positive.
/// * `random-walk`: level 10 plus a Gaussian random walk of step `noise`.
/// * `ar1`: level 10 plus an AR(1) with coefficient [`AR1_COEF`] and
///   innovation scale `noise`.
pub fn synth_generate(kind: SynthKind, dims: usize, steps: usize, noise: f64, weekly: f64, seed: u64) -> Result<SeriesFrame> {
    if dims == 0 || steps == 0 {
        return Err(ManfError::Empty("synthetic frame needs dims and steps".into()));
    }
    let mut rng = Rng::new(seed);
    let mut values = vec![0.0; dims * steps];
    for d in 0..dims {
        match kind {
            SynthKind::SinusoidMix => {
                let a1 = 0.5 + rng.uniform();
                let a2 = 0.5 * rng.uniform();
                let aw = weekly * (0.5 + rng.uniform());
                let (p1, p2, pw) = (2.0 * PI * rng.uniform(), 2.0 * PI * rng.uniform(), 2.0 * PI * rng.uniform());
                let level = 1.0 + a1 + a2 + aw;
                for t in 0..steps {
                    let h = (t % 24) as f64;
                    let w = (t % 168) as f64;
                    values[t * dims + d] = level
                        + a1 * (2.0 * PI * h / 24.0 + p1).sin()
                        + a2 * (2.0 * PI * h / 12.0 + p2).sin()
                        + aw * (2.0 * PI * w / 168.0 + pw).sin()
                        + noise * rng.normal();
                }
            }
            SynthKind::RandomWalk => {
                let mut x = 10.0;
                for t in 0..steps {
                    values[t * dims + d] = x;
                    x += noise * rng.normal();
                }
            }
            SynthKind::Ar1 => {
                let mut y = noise * rng.normal() / (1.0 - AR1_COEF * AR1_COEF).sqrt();
                for t in 0..steps {
                    values[t * dims + d] = 10.0 + y;
                    y = AR1_COEF * y + noise * rng.normal();
                }
            }
        }
    }
    let start = NaiveDate::from_ymd_opt(2020, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date");
    SeriesFrame::dense(Freq::Hourly, start, dims, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(rows: usize, dims: usize) -> SeriesFrame {
        let start = NaiveDate::from_ymd_opt(2021, 3, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        SeriesFrame::dense(Freq::Hourly, start, dims, (0..rows * dims).map(|i| i as f64 + 1.0).collect()).unwrap()
    }

    #[test]
    fn hour_features_span_the_interval() {
        let f = frame(24, 1);
        let feats = time_features(&f, 0..24);
        assert_eq!(feats[0], -0.5);
        assert_eq!(feats[23 * 3], 0.5);
        let hours: Vec<f64> = feats.iter().step_by(3).copied().collect();
        assert!(hours.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn eval_window_arithmetic() {
        assert_eq!(eval_starts(10, 4, 2, 6, 100).unwrap(), vec![4]);
        assert_eq!(eval_starts(10, 4, 2, 2, 100).unwrap(), vec![0, 2, 4]);
        assert!(matches!(eval_starts(5, 4, 2, 1, 1), Err(ManfError::Coverage(_))));
    }

    #[test]
    fn scaling_examples() {
        let m = window_means(&[2.0, 4.0], &[true, true], 1);
        assert_eq!(m, vec![3.0]);
        let s = mean_scale(&[2.0, 4.0], &m);
        assert_eq!(s, vec![2.0 / 3.0, 4.0 / 3.0]);
        assert_eq!(window_means(&[0.0, 0.0], &[true, true], 1), vec![1.0]);
        assert_eq!(window_means(&[5.0, 0.0], &[false, false], 1), vec![1.0]);
    }

    #[test]
    fn window_bounds_are_checked() {
        let f = frame(10, 2);
        assert!(f.window(4, 4, 2).is_ok());
        assert!(matches!(f.window(5, 4, 2), Err(ManfError::Coverage(_))));
        let w = f.window(1, 3, 2).unwrap();
        assert_eq!(w.context, f.values()[2..8].to_vec());
        assert_eq!(w.future, f.values()[8..12].to_vec());
    }

    #[test]
    fn zero_fraction_is_identity() {
        let f = frame(50, 3);
        assert_eq!(inject_missing(&f, 0.0, &mut Rng::new(1)).unwrap(), f);
        assert!(inject_missing(&f, 1.0, &mut Rng::new(1)).is_err());
    }
}
