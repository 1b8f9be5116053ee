//! Adam on the NLL objective, the epoch loop, and rolling-window evaluation.

use serde::{Deserialize, Serialize};

use crate::data::{inject_missing, make_windows, mixup, CorruptionSpec, Sampling, SeriesFrame, Window, WindowBatch};
use crate::error::{ManfError, Result};
use crate::flow::FlowMode;
use crate::metrics::{baseline_forecast, Baseline, ScoreReport};
use crate::model::{ForecastSamples, ManfModel};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tape;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    /// Global gradient-norm bound; `None` trains without clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// `0` disables mixup.
    pub mixup_alpha: f64,
    /// Score the holdout every this many epochs; `0` never.
    pub eval_every: usize,
    /// Tail windows (of `horizon` steps each) kept out of training.
    pub holdout_windows: usize,
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 64,
            epochs: 10,
            batches_per_epoch: 100,
            grad_clip: Some(10.0),
            seed: 0,
            mixup_alpha: 0.2,
            eval_every: 0,
            holdout_windows: 7,
            eval_samples: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ManfError::Contract(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.batches_per_epoch == 0 || self.eval_samples == 0 {
            return bad("batch_size, batches_per_epoch and eval_samples must be positive");
        }
        if self.grad_clip.is_some_and(|c| c <= 0.0) {
            return bad("grad_clip must be positive");
        }
        if self.mixup_alpha < 0.0 {
            return bad("mixup_alpha must be nonnegative");
        }
        Ok(())
    }
}

/// Adam moments aligned with the parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Bias-corrected Adam update from the gradients stored on each tensor.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(ManfError::Contract("optimizer state does not match parameters".into()));
    }
    if let Some(i) = store.tensors().iter().position(|t| t.grad.is_none()) {
        return Err(ManfError::Contract(format!("missing gradient for {}", store.names()[i])));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for ((tensor, m), v) in store.tensors_mut().iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = tensor.grad.take().expect("checked above");
        for (((x, g), m), v) in tensor.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *x -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
        tensor.grad = Some(g);
    }
    Ok(())
}

pub fn grad_norm(store: &ParamStore) -> f64 {
    store
        .tensors()
        .iter()
        .filter_map(|t| t.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grads(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grad_norm(store);
    if norm > max_norm {
        let f = max_norm / norm;
        for t in store.tensors_mut() {
            if let Some(g) = t.grad.as_mut() {
                g.iter_mut().for_each(|x| *x *= f);
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub crps_sum: Option<f64>,
    pub mse: Option<f64>,
}

/// Everything beyond the model needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub adam: AdamState,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(model: &ManfModel) -> Self {
        TrainState {
            epoch: 0,
            adam: AdamState::new(&model.store),
            history: Vec::new(),
        }
    }
}

/// Training batches draw from rows before the holdout tail.
pub fn train_limit(model: &ManfModel, frame: &SeriesFrame, cfg: &TrainConfig) -> usize {
    frame.len().saturating_sub(cfg.holdout_windows * model.config.horizon)
}

/// The batch for `(epoch, index)`; depends only on the seed and the key.
pub fn sample_batch(model: &ManfModel, frame: &SeriesFrame, cfg: &TrainConfig, epoch: usize, index: usize) -> Result<WindowBatch> {
    let mut rng = Rng::keyed(cfg.seed, &[epoch as u64, index as u64, 0]);
    let windows = make_windows(
        frame,
        model.config.context(),
        model.config.horizon,
        Sampling::Train {
            count: cfg.batch_size,
            limit: train_limit(model, frame, cfg),
        },
        &mut rng,
    )?;
    let batch = WindowBatch::from_windows(&windows)?;
    mixup(&batch, cfg.mixup_alpha, &mut rng)
}

/// One optimization step; returns the loss before the update.
pub fn train_step(model: &mut ManfModel, adam: &mut AdamState, batch: &WindowBatch, cfg: &TrainConfig, dropout_rng: Rng) -> Result<f64> {
    let mut tape = Tape::training(dropout_rng);
    let p = model.store.bind(&mut tape);
    let out = model.nll_on_tape(&mut tape, &p, batch, FlowMode::Train)?;
    let loss = tape.item(out.loss);
    tape.backward(out.loss)?;
    model.store.zero_grads();
    model.store.accumulate_grads(&tape, &p);
    let norm = match cfg.grad_clip {
        Some(c) => clip_grads(&mut model.store, c),
        None => grad_norm(&model.store),
    };
    if !norm.is_finite() {
        return Err(ManfError::non_finite("gradient norm"));
    }
    adam_step(&mut model.store, adam, cfg.lr)?;
    model.flow.apply_bn_stats(&out.bn_stats);
    Ok(loss)
}

/// Runs epochs `state.epoch .. cfg.epochs`, calling `on_epoch` after each.
/// Two consecutive non-finite steps abort the run.
pub fn train(
    model: &mut ManfModel,
    frame: &SeriesFrame,
    cfg: &TrainConfig,
    state: &mut TrainState,
    mut on_epoch: impl FnMut(&ManfModel, &TrainState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    let eval_cfg = EvalConfig {
        windows: cfg.holdout_windows,
        samples: cfg.eval_samples,
        seed: cfg.seed,
        normalized: false,
    };
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut total = 0.0;
        let mut finite_steps = 0usize;
        let mut bad_streak = 0usize;
        for b in 0..cfg.batches_per_epoch {
            let batch = sample_batch(model, frame, cfg, epoch, b)?;
            let dropout_rng = Rng::keyed(cfg.seed, &[epoch as u64, b as u64, 1]);
            match train_step(model, &mut state.adam, &batch, cfg, dropout_rng) {
                Ok(loss) => {
                    total += loss;
                    finite_steps += 1;
                    bad_streak = 0;
                }
                Err(ManfError::NonFinite { context }) => {
                    bad_streak += 1;
                    if bad_streak >= 2 {
                        return Err(ManfError::NonFinite {
                            context: format!(
                                "{context}: two consecutive non-finite steps at epoch {epoch}, batch {b} (step {})",
                                state.adam.step
                            ),
                        });
                    }
                }
                Err(e) => return Err(e),
            }
        }
        let mut rec = EpochRecord {
            epoch: epoch + 1,
            loss: if finite_steps == 0 { f64::NAN } else { total / finite_steps as f64 },
            crps_sum: None,
            mse: None,
        };
        if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
            let report = evaluate(model, frame, &eval_cfg, &CorruptionSpec::default())?;
            rec.crps_sum = Some(report.crps_sum);
            rec.mse = Some(report.mse);
        }
        state.history.push(rec);
        state.epoch += 1;
        on_epoch(model, state)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub windows: usize,
    pub samples: usize,
    pub seed: u64,
    pub normalized: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            windows: 7,
            samples: 100,
            seed: 0,
            normalized: false,
        }
    }
}

/// Tail windows for scoring. Under a horizon multiplier the context grows
/// in proportion and fewer windows fit in the same tail. Missing cells are
/// injected into the inputs only; targets come from the clean frame.
pub fn eval_windows(model: &ManfModel, frame: &SeriesFrame, cfg: &EvalConfig, corruption: &CorruptionSpec) -> Result<Vec<Window>> {
    corruption.validate()?;
    if frame.dims() != model.config.dims || frame.freq.num_features() != model.config.covariates {
        return Err(ManfError::DataMismatch(format!(
            "checkpoint expects {} series with {} covariates, data has {} with {}",
            model.config.dims,
            model.config.covariates,
            frame.dims(),
            frame.freq.num_features()
        )));
    }
    let mult = corruption.horizon_multiplier;
    let k = model.config.horizon * mult;
    let l = model.config.context() * mult;
    let count = (cfg.windows / mult).max(1);
    let mut windows = make_windows(frame, l, k, Sampling::Eval { stride: k, max: count }, &mut Rng::new(cfg.seed))?;
    if corruption.missing_fraction > 0.0 {
        let corrupted = inject_missing(frame, corruption.missing_fraction, &mut Rng::new(corruption.seed))?;
        for w in &mut windows {
            let c = corrupted.window(w.start, l, k)?;
            w.context = c.context;
            w.observed = c.observed;
        }
    }
    Ok(windows)
}

/// Upper bound on flow rows (`windows · samples · horizon`) per forecast
/// call; keeps evaluation memory flat in the number of windows.
const EVAL_ROWS: usize = 1 << 14;

pub fn evaluate(model: &ManfModel, frame: &SeriesFrame, cfg: &EvalConfig, corruption: &CorruptionSpec) -> Result<ScoreReport> {
    let windows = eval_windows(model, frame, cfg, corruption)?;
    let per_window = cfg.samples * windows[0].horizon;
    let chunk = (EVAL_ROWS / per_window).max(1);
    let mut rng = Rng::keyed(cfg.seed, &[u64::MAX]);
    let mut forecasts = Vec::with_capacity(windows.len());
    for part in windows.chunks(chunk) {
        forecasts.extend(model.forecast_batch(part, cfg.samples, &mut rng)?);
    }
    score_windows(&forecasts, &windows, cfg.normalized)
}

/// Scores a naive baseline on exactly the windows [`evaluate`] would use.
pub fn evaluate_baseline(
    kind: Baseline,
    model: &ManfModel,
    frame: &SeriesFrame,
    cfg: &EvalConfig,
    corruption: &CorruptionSpec,
) -> Result<ScoreReport> {
    let windows = eval_windows(model, frame, cfg, corruption)?;
    let mut rng = Rng::keyed(cfg.seed, &[u64::MAX - 1]);
    let forecasts = windows
        .iter()
        .map(|w| baseline_forecast(kind, w, cfg.samples, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    score_windows(&forecasts, &windows, cfg.normalized)
}

fn score_windows(forecasts: &[ForecastSamples], windows: &[Window], normalized: bool) -> Result<ScoreReport> {
    let obs: Vec<Vec<f64>> = windows.iter().map(|w| w.future.clone()).collect();
    ScoreReport::score(forecasts, &obs, normalized)
}
