//! Conditional normalizing-flow bijections.
//!
//! The generative direction maps a base draw `z₀ ~ N(0, I)` to a target
//! vector: `z₀ → coupling₁ → bn₁ → coupling₂ → bn₂ → … → x`. Densities are
//! evaluated in the opposite direction, accumulating `log|det|` terms:
//!
//! ```text
//! log p(x) = log N(z₀; 0, I) + Σ log|det ∂(x→z₀ step)|
//! ```
//!
//! Coupling layers keep one parity class of dimensions and scale/shift the
//! rest with `s`, `t` nets fed `[z_kept; cond]`. Batch-norm bijections
//! standardize in the density direction using batch statistics while
//! training and running averages otherwise.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{ManfError, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Tape, Var};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    /// `s, t` read the kept half of `z` and the condition.
    Coupling,
    /// `s, t` read only the condition; every dimension is transformed.
    Elementwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowMode {
    /// Batch statistics in BN layers (and running-average updates).
    Train,
    /// Running statistics in BN layers.
    Eval,
}

#[derive(Debug, Clone)]
struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Mlp {
    fn new(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, output: usize, rng: &mut Rng) -> Self {
        Mlp {
            w1: store.add_xavier(format!("{prefix}.w1"), input, hidden, rng),
            b1: store.add_zeros(format!("{prefix}.b1"), &[hidden]),
            // zero output layer: the flow starts as the identity
            w2: store.add_zeros(format!("{prefix}.w2"), &[hidden, output]),
            b2: store.add_zeros(format!("{prefix}.b2"), &[output]),
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p[self.w1])?;
        let h = tape.add(h, p[self.b1])?;
        let h = tape.relu(h)?;
        let o = tape.matmul(h, p[self.w2])?;
        tape.add(o, p[self.b2])
    }
}

/// Affine coupling bijection conditioned on an external vector.
#[derive(Debug, Clone)]
pub struct CouplingLayer {
    index: usize,
    dim: usize,
    cond_dim: usize,
    kept: Rc<Vec<usize>>,
    transformed: Rc<Vec<usize>>,
    /// Inverse of the `[kept, transformed]` column order.
    unshuffle: Rc<Vec<usize>>,
    s_net: Mlp,
    t_net: Mlp,
    scale_clamp: Option<f64>,
}

impl CouplingLayer {
    /// Layer `index` keeps dimensions with parity `index % 2`. With
    /// `Elementwise` conditioning, or when `dim == 1`, nothing is kept.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        index: usize,
        dim: usize,
        cond_dim: usize,
        hidden: usize,
        conditioning: Conditioning,
        scale_clamp: Option<f64>,
        rng: &mut Rng,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(ManfError::Empty("coupling dimension".into()));
        }
        let keep_any = conditioning == Conditioning::Coupling && dim > 1;
        let (kept, transformed): (Vec<usize>, Vec<usize>) =
            (0..dim).partition(|&j| keep_any && j % 2 == index % 2);
        if kept.is_empty() && cond_dim == 0 {
            return Err(ManfError::Contract(
                "coupling with nothing kept needs a condition".into(),
            ));
        }
        if let Some(c) = scale_clamp {
            if c <= 0.0 {
                return Err(ManfError::Contract(format!("scale clamp {c} must be positive")));
            }
        }
        let mut order: Vec<usize> = kept.clone();
        order.extend(&transformed);
        let mut unshuffle = vec![0; dim];
        for (pos, &j) in order.iter().enumerate() {
            unshuffle[j] = pos;
        }
        let input = kept.len() + cond_dim;
        let out = transformed.len();
        Ok(CouplingLayer {
            index,
            dim,
            cond_dim,
            s_net: Mlp::new(store, &format!("{prefix}.s"), input, hidden, out, rng),
            t_net: Mlp::new(store, &format!("{prefix}.t"), input, hidden, out, rng),
            kept: Rc::new(kept),
            transformed: Rc::new(transformed),
            unshuffle: Rc::new(unshuffle),
            scale_clamp,
        })
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn transformed(&self) -> &[usize] {
        &self.transformed
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn s_output(&self) -> (ParamId, ParamId) {
        (self.s_net.w2, self.s_net.b2)
    }

    pub fn t_output(&self) -> (ParamId, ParamId) {
        (self.t_net.w2, self.t_net.b2)
    }

    fn check(&self, tape: &Tape, z: Var, cond: Option<Var>) -> Result<usize> {
        let sz = tape.shape(z);
        if sz.len() != 2 || sz[1] != self.dim {
            return Err(ManfError::shape("coupling", sz, &[self.dim]));
        }
        let n = sz[0];
        match cond {
            Some(c) if tape.shape(c) != [n, self.cond_dim] => {
                Err(ManfError::shape("coupling condition", tape.shape(c), &[n, self.cond_dim]))
            }
            None if self.cond_dim > 0 => Err(ManfError::Contract(format!(
                "coupling {} expects a condition of width {}",
                self.index, self.cond_dim
            ))),
            _ => Ok(n),
        }
    }

    /// Returns `(kept, s, t)` for an input whose kept columns are `z`'s.
    fn scale_shift(&self, tape: &mut Tape, p: &Bound, z: Var, cond: Option<Var>) -> Result<(Option<Var>, Var, Var)> {
        let kept = if self.kept.is_empty() {
            None
        } else {
            Some(tape.select_last(z, self.kept.clone())?)
        };
        let h = match (kept, cond) {
            (Some(k), Some(c)) => tape.concat(&[k, c], 1)?,
            (Some(k), None) => k,
            (None, Some(c)) => c,
            (None, None) => unreachable!("rejected at construction"),
        };
        let raw = self.s_net.forward(tape, p, h)?;
        let s = match self.scale_clamp {
            Some(c) => {
                let r = tape.scale(raw, 1.0 / c);
                let r = tape.tanh(r)?;
                tape.scale(r, c)
            }
            None => raw,
        };
        let t = self.t_net.forward(tape, p, h)?;
        for (name, v) in [("s", s), ("t", t)] {
            if tape.value(v).iter().any(|x| !x.is_finite()) {
                return Err(ManfError::non_finite(format!(
                    "coupling layer {} {name} output",
                    self.index
                )));
            }
        }
        Ok((kept, s, t))
    }

    fn assemble(&self, tape: &mut Tape, kept: Option<Var>, moved: Var) -> Result<Var> {
        match kept {
            Some(k) => {
                let cat = tape.concat(&[k, moved], 1)?;
                tape.select_last(cat, self.unshuffle.clone())
            }
            None => Ok(moved),
        }
    }

    fn row_sum(tape: &mut Tape, s: Var, n: usize) -> Result<Var> {
        let ld = tape.sum_axis(s, 1)?;
        tape.reshape(ld, &[n])
    }

    /// Generative direction: `z_T ⊙ exp(s) + t`; logdet `Σ s` per row.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: Var, cond: Option<Var>) -> Result<(Var, Var)> {
        let n = self.check(tape, z, cond)?;
        let (kept, s, t) = self.scale_shift(tape, p, z, cond)?;
        let zt = tape.select_last(z, self.transformed.clone())?;
        let es = tape.exp(s)?;
        let moved = tape.mul(zt, es)?;
        let moved = tape.add(moved, t)?;
        let out = self.assemble(tape, kept, moved)?;
        let ld = Self::row_sum(tape, s, n)?;
        Ok((out, ld))
    }

    /// Density direction: `(x_T − t) ⊙ exp(−s)`; logdet `−Σ s` per row.
    pub fn inverse(&self, tape: &mut Tape, p: &Bound, x: Var, cond: Option<Var>) -> Result<(Var, Var)> {
        let n = self.check(tape, x, cond)?;
        let (kept, s, t) = self.scale_shift(tape, p, x, cond)?;
        let xt = tape.select_last(x, self.transformed.clone())?;
        let diff = tape.sub(xt, t)?;
        let ns = tape.neg(s);
        let ens = tape.exp(ns)?;
        let moved = tape.mul(diff, ens)?;
        let out = self.assemble(tape, kept, moved)?;
        let ld = Self::row_sum(tape, ns, n)?;
        Ok((out, ld))
    }
}

/// Per-dimension statistics a BN bijection used on one pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch normalization as a bijection:
/// `y = γ (x − μ) / √(σ² + ε) + β` in the density direction.
#[derive(Debug, Clone)]
pub struct BatchNormBijection {
    index: usize,
    dim: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormBijection {
    pub fn new(store: &mut ParamStore, prefix: &str, index: usize, dim: usize) -> Self {
        BatchNormBijection {
            index,
            dim,
            gamma: store.add_ones(format!("{prefix}.gamma"), &[dim]),
            beta: store.add_zeros(format!("{prefix}.beta"), &[dim]),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    fn check(&self, tape: &Tape, p: &Bound, x: Var) -> Result<usize> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.dim {
            return Err(ManfError::shape("batch_norm", s, &[self.dim]));
        }
        if tape.value(p[self.gamma]).contains(&0.0) {
            return Err(ManfError::Singular(format!("bn layer {} has gamma = 0", self.index)));
        }
        Ok(s[0])
    }

    fn running(&self) -> BnStats {
        BnStats {
            mean: self.running_mean.clone(),
            var: self.running_var.clone(),
        }
    }

    /// Density direction. In `Train` mode statistics come from the batch
    /// (differentiably) and are returned for a later running-average update.
    pub fn normalize(&self, tape: &mut Tape, p: &Bound, x: Var, mode: FlowMode) -> Result<(Var, Var, BnStats)> {
        let n = self.check(tape, p, x)?;
        let (mean, var) = match mode {
            FlowMode::Train => {
                if n < 2 {
                    return Err(ManfError::Contract(format!(
                        "batch-norm training needs at least 2 rows, got {n}"
                    )));
                }
                (tape.mean_axis(x, 0)?, tape.var_axis(x, 0)?)
            }
            FlowMode::Eval => (
                tape.constant(&[1, self.dim], self.running_mean.clone())?,
                tape.constant(&[1, self.dim], self.running_var.clone())?,
            ),
        };
        let stats = BnStats {
            mean: tape.value(mean).to_vec(),
            var: tape.value(var).to_vec(),
        };
        let centered = tape.sub(x, mean)?;
        let ve = tape.add_scalar(var, self.eps);
        let sd = tape.sqrt(ve)?;
        let xhat = tape.div(centered, sd)?;
        let scaled = tape.mul(xhat, p[self.gamma])?;
        let y = tape.add(scaled, p[self.beta])?;
        // Σ_d log|γ_d| − ½ log(σ²_d + ε), identical for every row
        let g2 = tape.square(p[self.gamma])?;
        let lg = tape.log(g2)?;
        let lv = tape.log(ve)?;
        let diff = tape.sub(lg, lv)?;
        let per = tape.scale(diff, 0.5);
        let total = tape.sum(per);
        let ones = tape.constant(&[n], vec![1.0; n])?;
        let ld = tape.mul(ones, total)?;
        Ok((y, ld, stats))
    }

    /// Generative direction using the given statistics (running stats when
    /// `stats` is `None`).
    pub fn denormalize(&self, tape: &mut Tape, p: &Bound, y: Var, stats: Option<&BnStats>) -> Result<(Var, Var)> {
        let n = self.check(tape, p, y)?;
        let st = stats.cloned().unwrap_or_else(|| self.running());
        let mean = tape.constant(&[1, self.dim], st.mean)?;
        let var = tape.constant(&[1, self.dim], st.var)?;
        let ve = tape.add_scalar(var, self.eps);
        let sd = tape.sqrt(ve)?;
        let shifted = tape.sub(y, p[self.beta])?;
        let xhat = tape.div(shifted, p[self.gamma])?;
        let scaled = tape.mul(xhat, sd)?;
        let x = tape.add(scaled, mean)?;
        let g2 = tape.square(p[self.gamma])?;
        let lg = tape.log(g2)?;
        let lv = tape.log(ve)?;
        let diff = tape.sub(lv, lg)?;
        let per = tape.scale(diff, 0.5);
        let total = tape.sum(per);
        let ones = tape.constant(&[n], vec![1.0; n])?;
        let ld = tape.mul(ones, total)?;
        Ok((x, ld))
    }

    /// `running ← momentum · running + (1 − momentum) · batch`.
    pub fn update_running(&mut self, stats: &BnStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

#[derive(Debug, Clone)]
pub enum Bijection {
    Coupling(CouplingLayer),
    BatchNorm(BatchNormBijection),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub dim: usize,
    pub cond_dim: usize,
    pub couplings: usize,
    pub hidden: usize,
    pub conditioning: Conditioning,
    pub scale_clamp: Option<f64>,
    pub batch_norm: bool,
}

/// Density evaluation with every intermediate log-det exposed.
#[derive(Debug, Clone)]
pub struct LogProbTrace {
    /// Per-row `log p(x)`, `[N]`.
    pub log_prob: Var,
    /// Per-row base log-density of `z₀`, `[N]`.
    pub base: Var,
    /// Per-bijection log-dets in density order, each `[N]`.
    pub logdets: Vec<Var>,
    pub z0: Var,
    /// Batch statistics of each BN layer, in stack order.
    pub bn_stats: Vec<BnStats>,
}

/// Ordered bijections in the generative direction.
#[derive(Debug, Clone)]
pub struct FlowStack {
    pub layers: Vec<Bijection>,
    dim: usize,
    couplings: usize,
}

impl FlowStack {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &FlowConfig, rng: &mut Rng) -> Result<Self> {
        let mut layers = Vec::new();
        for i in 0..cfg.couplings {
            layers.push(Bijection::Coupling(CouplingLayer::new(
                store,
                &format!("{prefix}.coupling{i}"),
                i,
                cfg.dim,
                cfg.cond_dim,
                cfg.hidden,
                cfg.conditioning,
                cfg.scale_clamp,
                rng,
            )?));
            if cfg.batch_norm {
                layers.push(Bijection::BatchNorm(BatchNormBijection::new(
                    store,
                    &format!("{prefix}.bn{i}"),
                    i,
                    cfg.dim,
                )));
            }
        }
        Ok(FlowStack {
            layers,
            dim: cfg.dim,
            couplings: cfg.couplings,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_couplings(&self) -> usize {
        self.couplings
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = &BatchNormBijection> {
        self.layers.iter().filter_map(|b| match b {
            Bijection::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }

    pub fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNormBijection> {
        self.layers.iter_mut().filter_map(|b| match b {
            Bijection::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }

    fn check_conds(&self, conds: &[Option<Var>]) -> Result<()> {
        if conds.len() != self.couplings {
            return Err(ManfError::Contract(format!(
                "{} conditions for {} couplings",
                conds.len(),
                self.couplings
            )));
        }
        Ok(())
    }

    /// `log p(x)` per row of `x: [N, D]`; `conds[i]` feeds coupling `i`.
    pub fn log_prob(&self, tape: &mut Tape, p: &Bound, x: Var, conds: &[Option<Var>], mode: FlowMode) -> Result<LogProbTrace> {
        self.check_conds(conds)?;
        let n = tape.shape(x)[0];
        let mut z = x;
        let mut logdets = Vec::with_capacity(self.layers.len());
        let mut bn_stats = Vec::new();
        let mut coupling = self.couplings;
        for bij in self.layers.iter().rev() {
            let ld = match bij {
                Bijection::Coupling(c) => {
                    coupling -= 1;
                    let (nz, ld) = c.inverse(tape, p, z, conds[coupling])?;
                    z = nz;
                    ld
                }
                Bijection::BatchNorm(bn) => {
                    let (nz, ld, st) = bn.normalize(tape, p, z, mode)?;
                    bn_stats.push(st);
                    z = nz;
                    ld
                }
            };
            logdets.push(ld);
        }
        bn_stats.reverse();
        // log N(z; 0, I) = −½ Σ z² − (D/2) log 2π
        let sq = tape.square(z)?;
        let ss = tape.sum_axis(sq, 1)?;
        let ss = tape.reshape(ss, &[n])?;
        let base = tape.scale(ss, -0.5);
        let base = tape.add_scalar(base, -0.5 * self.dim as f64 * LN_2PI);
        let mut total = base;
        for &ld in &logdets {
            total = tape.add(total, ld)?;
        }
        if tape.value(total).iter().any(|v| !v.is_finite()) {
            return Err(ManfError::non_finite("flow log-probability"));
        }
        Ok(LogProbTrace {
            log_prob: total,
            base,
            logdets,
            z0: z,
            bn_stats,
        })
    }

    /// Pushes base draws `z0: [N, D]` through the generative direction,
    /// using running BN statistics.
    pub fn push_forward(&self, tape: &mut Tape, p: &Bound, z0: Var, conds: &[Option<Var>]) -> Result<Var> {
        self.check_conds(conds)?;
        let mut z = z0;
        let mut coupling = 0;
        for bij in &self.layers {
            z = match bij {
                Bijection::Coupling(c) => {
                    let (nz, _) = c.forward(tape, p, z, conds[coupling])?;
                    coupling += 1;
                    nz
                }
                Bijection::BatchNorm(bn) => bn.denormalize(tape, p, z, None)?.0,
            };
        }
        Ok(z)
    }

    /// Draws `z₀ ~ N(0, I)` for each condition row and maps it forward.
    /// `conds` rows define the sample count.
    pub fn sample(&self, tape: &mut Tape, p: &Bound, rng: &mut Rng, conds: &[Option<Var>], n: usize) -> Result<Var> {
        let z0 = tape.constant(&[n, self.dim], rng.normal_vec(n * self.dim))?;
        self.push_forward(tape, p, z0, conds)
    }

    pub fn apply_bn_stats(&mut self, stats: &[BnStats]) {
        for (bn, st) in self.batch_norms_mut().zip(stats) {
            bn.update_running(st);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn identity_stack(dim: usize, cond_dim: usize, bn: bool) -> (ParamStore, FlowStack) {
        let mut store = ParamStore::new();
        let cfg = FlowConfig {
            dim,
            cond_dim,
            couplings: 3,
            hidden: 16,
            conditioning: Conditioning::Coupling,
            scale_clamp: Some(2.0),
            batch_norm: bn,
        };
        let stack = FlowStack::new(&mut store, "flow", &cfg, &mut Rng::new(0)).unwrap();
        (store, stack)
    }

    #[test]
    fn mask_alternates_parity() {
        let (_, stack) = identity_stack(5, 2, false);
        let masks: Vec<_> = stack
            .layers
            .iter()
            .map(|b| match b {
                Bijection::Coupling(c) => c.kept().to_vec(),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(masks, vec![vec![0, 2, 4], vec![1, 3], vec![0, 2, 4]]);
    }

    #[test]
    fn identity_stack_at_origin() {
        let (store, stack) = identity_stack(2, 3, false);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(&[1, 2], vec![0.0, 0.0]).unwrap();
        let c = tape.constant(&[1, 3], vec![0.3, -1.0, 2.0]).unwrap();
        let tr = stack.log_prob(&mut tape, &p, x, &[Some(c); 3], FlowMode::Eval).unwrap();
        let lp = tape.item(tr.log_prob);
        assert!((lp + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
        assert!((lp + 1.8379).abs() < 1e-4);
    }

    #[test]
    fn bn_logdet_forced_arithmetic() {
        let mut store = ParamStore::new();
        let mut bn = BatchNormBijection::new(&mut store, "bn", 0, 1);
        bn.eps = 0.0;
        bn.running_var = vec![3.0];
        store.get_mut(bn.gamma).data_mut()[0] = 2.0;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(&[1, 1], vec![0.4]).unwrap();
        let (_, ld, _) = bn.normalize(&mut tape, &p, x, FlowMode::Eval).unwrap();
        assert!((tape.item(ld) - (2f64.ln() - 0.5 * 3f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn bn_zero_gamma_is_singular() {
        let mut store = ParamStore::new();
        let bn = BatchNormBijection::new(&mut store, "bn", 0, 2);
        store.get_mut(bn.gamma).data_mut()[1] = 0.0;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(&[2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(
            bn.normalize(&mut tape, &p, x, FlowMode::Eval),
            Err(ManfError::Singular(_))
        ));
    }

    #[test]
    fn bn_train_needs_two_rows() {
        let mut store = ParamStore::new();
        let bn = BatchNormBijection::new(&mut store, "bn", 0, 2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(&[1, 2], vec![0.0; 2]).unwrap();
        assert!(bn.normalize(&mut tape, &p, x, FlowMode::Train).is_err());
    }

    #[test]
    fn bn_standardized_batch_is_identity() {
        let mut store = ParamStore::new();
        let mut bn = BatchNormBijection::new(&mut store, "bn", 0, 1);
        bn.eps = 0.0;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(&[2, 1], vec![-1.0, 1.0]).unwrap();
        let (y, ld, st) = bn.normalize(&mut tape, &p, x, FlowMode::Train).unwrap();
        assert_eq!(tape.value(y), &[-1.0, 1.0]);
        assert_eq!(tape.value(ld), &[0.0, 0.0]);
        assert_eq!(st, BnStats { mean: vec![0.0], var: vec![1.0] });
    }

    #[test]
    fn running_stats_update_with_momentum() {
        let mut store = ParamStore::new();
        let mut bn = BatchNormBijection::new(&mut store, "bn", 0, 1);
        bn.update_running(&BnStats { mean: vec![2.0], var: vec![3.0] });
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((bn.running_var[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn coupling_rejects_wrong_condition_width() {
        let (store, stack) = identity_stack(4, 3, false);
        let Bijection::Coupling(c) = &stack.layers[0] else { unreachable!() };
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let z = tape.leaf(&Tensor::zeros(&[2, 4]));
        let bad = tape.leaf(&Tensor::zeros(&[2, 2]));
        assert!(c.forward(&mut tape, &p, z, Some(bad)).is_err());
        assert!(c.forward(&mut tape, &p, z, None).is_err());
    }
}
