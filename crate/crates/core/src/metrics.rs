//! Sample-based scoring: CRPS, CRPS-sum, MSE and naive baselines.

use serde::{Deserialize, Serialize};

use crate::data::Window;
use crate::error::{ManfError, Result};
use crate::model::ForecastSamples;
use crate::rng::Rng;

fn nonempty(samples: &[f64]) -> Result<()> {
    if samples.is_empty() {
        return Err(ManfError::Contract("CRPS needs at least one sample".into()));
    }
    Ok(())
}

/// Exact `∫ (F̂(y) − 1{x ≤ y})² dy` for the empirical CDF of `samples`,
/// integrated piecewise between the sorted breakpoints.
pub fn crps_samples(samples: &[f64], x: f64) -> Result<f64> {
    nonempty(samples)?;
    let mut pts: Vec<(f64, bool)> = samples.iter().map(|&v| (v, false)).collect();
    pts.push((x, true));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = samples.len() as f64;
    let (mut below, mut step, mut total) = (0usize, 0.0, 0.0);
    for (i, &(v, is_obs)) in pts.iter().enumerate() {
        if is_obs {
            step = 1.0;
        } else {
            below += 1;
        }
        if let Some(&(next, _)) = pts.get(i + 1) {
            let gap = below as f64 / n - step;
            total += gap * gap * (next - v);
        }
    }
    Ok(total)
}

/// `E|X − x| − ½ E|X − X′|` summed over every sample pair.
pub fn crps_energy(samples: &[f64], x: f64) -> Result<f64> {
    nonempty(samples)?;
    let n = samples.len() as f64;
    let a: f64 = samples.iter().map(|s| (s - x).abs()).sum::<f64>() / n;
    let mut b = 0.0;
    for si in samples {
        for sj in samples {
            b += (si - sj).abs();
        }
    }
    Ok(a - 0.5 * b / (n * n))
}

/// Time-averaged CRPS of the cross-series sum; `obs` is `k × D`.
pub fn crps_sum(f: &ForecastSamples, obs: &[f64]) -> Result<f64> {
    check_obs(f, obs)?;
    let mut acc = 0.0;
    for t in 0..f.horizon {
        let x: f64 = obs[t * f.dims..(t + 1) * f.dims].iter().sum();
        acc += crps_samples(&f.summed(t), x)?;
    }
    Ok(acc / f.horizon as f64)
}

/// Time-averaged CRPS of each series' marginal, length `D`.
pub fn crps_per_series(f: &ForecastSamples, obs: &[f64]) -> Result<Vec<f64>> {
    check_obs(f, obs)?;
    let mut out = vec![0.0; f.dims];
    for t in 0..f.horizon {
        for (d, o) in out.iter_mut().enumerate() {
            *o += crps_samples(&f.marginal(t, d), obs[t * f.dims + d])?;
        }
    }
    out.iter_mut().for_each(|o| *o /= f.horizon as f64);
    Ok(out)
}

/// Mean over `(t, d)` of the squared error of the sample mean.
pub fn mse(f: &ForecastSamples, obs: &[f64]) -> Result<f64> {
    check_obs(f, obs)?;
    let m = f.mean();
    Ok(m.iter().zip(obs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / m.len() as f64)
}

fn check_obs(f: &ForecastSamples, obs: &[f64]) -> Result<()> {
    if obs.len() != f.horizon * f.dims {
        return Err(ManfError::shape("score", &[f.horizon, f.dims], &[obs.len()]));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub crps_sum: f64,
    pub mse: f64,
    pub per_series_crps: Vec<f64>,
    pub n_samples: usize,
    pub windows: usize,
}

impl ScoreReport {
    /// Averages over windows; `obs[i]` is the `k × D` truth for `forecasts[i]`.
    /// With `normalized`, CRPS-sum is divided by the mean of `Σ_d |x_d^t|`.
    pub fn score(forecasts: &[ForecastSamples], obs: &[Vec<f64>], normalized: bool) -> Result<Self> {
        if forecasts.is_empty() || forecasts.len() != obs.len() {
            return Err(ManfError::Empty("no forecast windows to score".into()));
        }
        let w = forecasts.len() as f64;
        let dims = forecasts[0].dims;
        let mut crps = 0.0;
        let mut err = 0.0;
        let mut per = vec![0.0; dims];
        let mut abs_sum = 0.0;
        for (f, o) in forecasts.iter().zip(obs) {
            crps += crps_sum(f, o)? / w;
            err += mse(f, o)? / w;
            for (p, c) in per.iter_mut().zip(crps_per_series(f, o)?) {
                *p += c / w;
            }
            abs_sum += o.iter().map(|v| v.abs()).sum::<f64>() / (f.horizon as f64 * w);
        }
        if normalized && abs_sum > 0.0 {
            crps /= abs_sum;
        }
        Ok(ScoreReport {
            crps_sum: crps,
            mse: err,
            per_series_crps: per,
            n_samples: forecasts[0].n,
            windows: forecasts.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// Last value plus bootstrapped cumulative one-step changes.
    Persistence,
    /// Independent draws from each series' observed context values.
    Climatology,
}

pub fn baseline_forecast(kind: Baseline, w: &Window, n: usize, rng: &mut Rng) -> Result<ForecastSamples> {
    if n == 0 {
        return Err(ManfError::Contract("sample count must be positive".into()));
    }
    let (l, k, d) = (w.context_len, w.horizon, w.dims);
    let series: Vec<Vec<f64>> = (0..d)
        .map(|j| (0..l).filter(|&t| w.observed[t * d + j]).map(|t| w.context[t * d + j]).collect())
        .collect();
    if let Some(j) = series.iter().position(|s| s.is_empty()) {
        return Err(ManfError::Coverage(format!("series {j} has no observed context")));
    }
    let mut out = vec![0.0; n * k * d];
    match kind {
        Baseline::Climatology => {
            for s in 0..n {
                for t in 0..k {
                    for (j, vals) in series.iter().enumerate() {
                        out[(s * k + t) * d + j] = vals[rng.below(vals.len())];
                    }
                }
            }
        }
        Baseline::Persistence => {
            let resid: Vec<Vec<f64>> = series
                .iter()
                .map(|v| {
                    let r: Vec<f64> = v.windows(2).map(|p| p[1] - p[0]).collect();
                    if r.is_empty() {
                        vec![0.0]
                    } else {
                        r
                    }
                })
                .collect();
            for s in 0..n {
                for (j, vals) in series.iter().enumerate() {
                    let mut x = *vals.last().expect("nonempty");
                    for t in 0..k {
                        x += resid[j][rng.below(resid[j].len())];
                        out[(s * k + t) * d + j] = x;
                    }
                }
            }
        }
    }
    ForecastSamples::new(n, k, d, out, vec![1.0; d], w.start + l)
}
