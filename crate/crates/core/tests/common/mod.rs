#![allow(dead_code)]

use manf_core::{Result, Tape, Tensor, Var};

/// Norm-wise relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Central-difference gradient of a scalar function built on a fresh tape.
pub fn numeric_grad<F>(inputs: &[Tensor], which: usize, h: f64, f: &F) -> Vec<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars).expect("forward");
        tape.item(out)
    };
    let n = inputs[which].numel();
    let mut grad = vec![0.0; n];
    let mut work = inputs.to_vec();
    for i in 0..n {
        let x0 = inputs[which].data()[i];
        work[which].data_mut()[i] = x0 + h;
        let fp = eval(&work);
        work[which].data_mut()[i] = x0 - h;
        let fm = eval(&work);
        work[which].data_mut()[i] = x0;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Analytic gradients of every input via one backward pass.
pub fn analytic_grads<F>(inputs: &[Tensor], f: &F) -> Vec<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars).expect("forward");
    tape.backward(out).expect("backward");
    vars.iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect()
}

/// Worst relative error across all inputs.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(inputs, &f);
    (0..inputs.len())
        .map(|i| rel_err(&analytic[i], &numeric_grad(inputs, i, 1e-5, &f)))
        .fold(0.0, f64::max)
}

/// Reduces `out` to a scalar with fixed pseudo-random weights so that every
/// output element carries a distinct upstream gradient.
pub fn weighted_sum(tape: &mut Tape, out: Var) -> Result<Var> {
    let n: usize = tape.shape(out).iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.7).sin()).collect();
    let shape = tape.shape(out).to_vec();
    let wv = tape.constant(&shape, w)?;
    let p = tape.mul(out, wv)?;
    Ok(tape.sum(p))
}

/// Overwrites every parameter with N(0, std²) draws (zero-initialised biases
/// would otherwise hide bugs in the terms they gate).
pub fn randomize(store: &mut manf_core::ParamStore, std: f64, seed: u64) {
    let mut rng = manf_core::Rng::new(seed);
    for t in store.tensors_mut() {
        for x in t.data_mut() {
            *x = rng.normal() * std;
        }
    }
}

pub fn matrix(store: &manf_core::ParamStore, name: &str) -> Vec<f64> {
    store
        .by_name(name)
        .unwrap_or_else(|| panic!("missing {name}"))
        .data()
        .to_vec()
}

/// Row-major `x (n×k) · w (k×m)`.
pub fn mat(x: &[f64], w: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|p| x[i * k + p] * w[p * m + j]).sum();
        }
    }
    out
}

/// Fan-in scaled Gaussian re-initialisation: each matrix gets
/// `N(0, (gain²/rows))`, vectors `N(0, gain²/4)`.
pub fn randomize_scaled(store: &mut manf_core::ParamStore, gain: f64, seed: u64) {
    let mut rng = manf_core::Rng::new(seed);
    for t in store.tensors_mut() {
        let std = match t.shape() {
            [rows, _] => gain / (*rows as f64).sqrt(),
            _ => gain / 2.0,
        };
        for x in t.data_mut() {
            *x = rng.normal() * std;
        }
    }
}

/// `log|det A|` by Gaussian elimination with partial pivoting.
pub fn log_abs_det(a: &[f64], n: usize) -> f64 {
    let mut m = a.to_vec();
    let mut acc = 0.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().partial_cmp(&m[j * n + col].abs()).unwrap())
            .unwrap();
        if piv != col {
            for c in 0..n {
                m.swap(col * n + c, piv * n + c);
            }
        }
        let d = m[col * n + col];
        acc += d.abs().ln();
        for r in col + 1..n {
            let f = m[r * n + col] / d;
            for c in col..n {
                m[r * n + c] -= f * m[col * n + c];
            }
        }
    }
    acc
}

/// Central-difference Jacobian of `f: R^n → R^n`, row-major `J[i][j] = ∂f_i/∂x_j`.
pub fn fd_jacobian(x: &[f64], h: f64, f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let n = x.len();
    let mut jac = vec![0.0; n * n];
    let mut w = x.to_vec();
    for j in 0..n {
        w[j] = x[j] + h;
        let fp = f(&w);
        w[j] = x[j] - h;
        let fm = f(&w);
        w[j] = x[j];
        for i in 0..n {
            jac[i * n + j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}
