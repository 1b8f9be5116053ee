use std::rc::Rc;

use super::kernels::{broadcast_shape, gemm, gemm_nt, gemm_tn, Bcast};
use super::{numel, Tensor};
use crate::error::{ManfError, Result};
use crate::rng::Rng;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Exp,
    Log,
    Tanh,
    Relu,
    Sqrt,
    Square,
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SumAll(Var),
    SumAxis(Var, usize),
    Softmax(Var),
    MaskFill(Var, Rc<Vec<bool>>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Gather {
        x: Var,
        idx: Rc<Vec<usize>>,
        cols_in: usize,
    },
    Dropout(Var, Vec<f64>),
    RelScores {
        qu: Var,
        kt: Var,
        qv: Var,
        rt: Var,
        half: usize,
        scale: f64,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Linear record of a computation, replayed in reverse by [`Tape::backward`].
///
/// Nodes are appended in evaluation order, so the record is already a
/// topological order. Gradients are kept for leaves only; they accumulate
/// across `backward` calls until [`Tape::zero_grad`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    training: bool,
    rng: Option<Rng>,
}

/// Splits a shape at `axis` into (outer, extent, inner) sizes.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

/// Gradient slot of a parent, allocated lazily; `None` if it needs no grad.
fn sink<'a>(nodes: &[Node], local: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(local[v.0].get_or_insert_with(|| vec![0.0; n]))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A tape in training mode: dropout is active and draws from `rng`.
    pub fn training(rng: Rng) -> Self {
        Tape {
            training: true,
            rng: Some(rng),
            ..Tape::default()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Binds a tensor; differentiable iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Binds a tensor as a differentiable leaf regardless of its flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(ManfError::shape("constant", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(vec![], vec![x], Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_vec(&n.shape, n.value.clone()).expect("node shape invariant")
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---------------------------------------------------------------
    // elementwise

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out = broadcast_shape(&sa, &sb)?;
        let pa = Bcast::plan(&out, &sa);
        let pb = Bcast::plan(&out, &sb);
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let n = numel(&out);
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let value: Vec<f64> = match (&pa, &pb) {
            (Bcast::Same, Bcast::Same) => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            (Bcast::Same, Bcast::Suffix(m)) => {
                let m = *m;
                va.chunks(m)
                    .flat_map(|row| row.iter().zip(vb.iter()).map(|(&x, &y)| f(x, y)))
                    .collect()
            }
            _ => (0..n).map(|i| f(va[pa.index(i)], vb[pb.index(i)])).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let value: Vec<f64> = match kind {
            Unary::Exp => v.iter().map(|a| a.exp()).collect(),
            Unary::Log => {
                if let Some(bad) = v.iter().find(|&&a| a <= 0.0 || a.is_nan()) {
                    return Err(ManfError::Domain {
                        op: "log",
                        msg: format!("non-positive input {bad}"),
                    });
                }
                v.iter().map(|a| a.ln()).collect()
            }
            Unary::Tanh => v.iter().map(|a| a.tanh()).collect(),
            Unary::Relu => v.iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect(),
            Unary::Sqrt => {
                if let Some(bad) = v.iter().find(|&&a| a < 0.0 || a.is_nan()) {
                    return Err(ManfError::Domain {
                        op: "sqrt",
                        msg: format!("negative input {bad}"),
                    });
                }
                v.iter().map(|a| a.sqrt()).collect()
            }
            Unary::Square => v.iter().map(|a| a * a).collect(),
        };
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, value, Op::Unary(kind, x), rg))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.nodes[x.0].value.iter().map(|a| a * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, value, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.nodes[x.0].value.iter().map(|a| a + c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, value, Op::AddScalar(x), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    // ---------------------------------------------------------------
    // linear algebra

    fn matmul_dims(&self, a: Var, b: Var) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>, usize, usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(ManfError::shape("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let ba = sa[..sa.len() - 2].to_vec();
        let bb = sb[..sb.len() - 2].to_vec();
        let batch = broadcast_shape(&ba, &bb).map_err(|_| ManfError::shape("matmul", sa, sb))?;
        Ok((ba, bb, batch, m, k, n))
    }

    /// Batched matrix product with trailing-dimension batch broadcasting.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, bb, batch, m, k, n) = self.matmul_dims(a, b)?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let nb = numel(&batch);
        let mut out = vec![0.0; nb * m * n];
        if bb.is_empty() {
            // b is a plain matrix: fold a's batch into its rows
            let rows = numel(&ba) * m;
            gemm(va, vb, &mut out, rows, k, n);
            // a batch may be broadcast against nothing; shapes equal here
        } else {
            let pa = Bcast::plan(&batch, &ba);
            let pb = Bcast::plan(&batch, &bb);
            for i in 0..nb {
                let ia = pa.index(i);
                let ib = pb.index(i);
                gemm(
                    &va[ia * m * k..(ia + 1) * m * k],
                    &vb[ib * k * n..(ib + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = batch;
        shape.push(m);
        shape.push(n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::MatMul(a, b), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(ManfError::shape("transpose", &s, &[]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let v = &self.nodes[x.0].value;
        let mut out = vec![0.0; v.len()];
        for (src, dst) in v.chunks(r * c).zip(out.chunks_mut(r * c)) {
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = s;
        let l = shape.len();
        shape.swap(l - 1, l - 2);
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(ManfError::shape("reshape", self.shape(x), shape));
        }
        let value = self.nodes[x.0].value.clone();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), rg))
    }

    // ---------------------------------------------------------------
    // reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.iter().sum();
        let rg = self.rg(x);
        self.push(vec![], vec![s], Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(ManfError::Index {
                index: axis,
                len: s.len(),
            });
        }
        let (outer, ext, inner) = split_axis(&s, axis);
        let v = &self.nodes[x.0].value;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let src = &v[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (d, &a) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += a;
                }
            }
        }
        let mut shape = s;
        shape[axis] = 1;
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::SumAxis(x, axis), rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ext = *self.shape(x).get(axis).ok_or(ManfError::Index {
            index: axis,
            len: self.shape(x).len(),
        })?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / ext as f64))
    }

    /// Population variance over `axis`, keeping it with extent 1.
    pub fn var_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let mu = self.mean_axis(x, axis)?;
        let d = self.sub(x, mu)?;
        let d2 = self.square(d)?;
        self.mean_axis(d2, axis)
    }

    // ---------------------------------------------------------------
    // normalization

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().ok_or_else(|| ManfError::shape("softmax", &s, &[]))?;
        let v = &self.nodes[x.0].value;
        let mut out = vec![0.0; v.len()];
        for (src, dst) in v.chunks(c).zip(out.chunks_mut(c)) {
            let mx = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (d, &a) in dst.iter_mut().zip(src) {
                // masked entries are exact zeros; skip the exp
                if a != f64::NEG_INFINITY {
                    *d = (a - mx).exp();
                    z += *d;
                }
            }
            let inv = 1.0 / z;
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(s, out, Op::Softmax(x), rg))
    }

    /// Replaces entries with `-inf` where `keep` is false. `keep` covers the
    /// trailing block of `x` and repeats over leading axes.
    pub fn mask_fill(&mut self, x: Var, keep: Rc<Vec<bool>>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = keep.len();
        if n == 0 || numel(&s) % n != 0 {
            return Err(ManfError::shape("mask_fill", &s, &[n]));
        }
        let v = &self.nodes[x.0].value;
        let out: Vec<f64> = v
            .iter()
            .enumerate()
            .map(|(i, &a)| if keep[i % n] { a } else { f64::NEG_INFINITY })
            .collect();
        let rg = self.rg(x);
        Ok(self.push(s, out, Op::MaskFill(x, keep), rg))
    }

    /// `(x - mean) / sqrt(var + eps) * gamma + beta` over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().ok_or_else(|| ManfError::shape("layer_norm", &s, &[]))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(ManfError::shape("layer_norm", &s, self.shape(gamma)));
        }
        let v = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let rows = v.len() / c;
        let mut xhat = vec![0.0; v.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let src = &v[r * c..(r + 1) * c];
            let mu = src.iter().sum::<f64>() / c as f64;
            let var = src.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / c as f64;
            let denom = (var + eps).sqrt();
            let rs = if denom > 0.0 { 1.0 / denom } else { 0.0 };
            rstd[r] = rs;
            for j in 0..c {
                let h = (src[j] - mu) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            s,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------
    // structural

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(ManfError::Index {
                index: start + len,
                len: s.get(axis).copied().unwrap_or(0),
            });
        }
        let (outer, ext, inner) = split_axis(&s, axis);
        let v = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Slice { x, axis, start }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| ManfError::Empty("concat".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(ManfError::Index {
                index: axis,
                len: first.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(ax, (a, b))| ax == axis || a == b);
            if !ok {
                return Err(ManfError::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let ext = self.nodes[p.0].shape[axis];
                let v = &self.nodes[p.0].value;
                out.extend_from_slice(&v[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Row-wise gather over the last two axes: for `x: [.., R, C]`,
    /// `out[.., r, j] = x[.., r, idx[r * cols_out + j]]`.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>, cols_out: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(ManfError::shape("gather_rows", &s, &[cols_out]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        if idx.len() != r * cols_out {
            return Err(ManfError::shape("gather_rows", &s, &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(ManfError::Index { index: bad, len: c });
        }
        let v = &self.nodes[x.0].value;
        let batch = v.len() / (r * c);
        let mut out = Vec::with_capacity(batch * r * cols_out);
        for b in 0..batch {
            for row in 0..r {
                let src = &v[(b * r + row) * c..(b * r + row + 1) * c];
                out.extend(idx[row * cols_out..(row + 1) * cols_out].iter().map(|&j| src[j]));
            }
        }
        let mut shape = s;
        let l = shape.len();
        shape[l - 1] = cols_out;
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Gather { x, idx, cols_in: c }, rg))
    }

    /// Selects columns of the last axis: `out[.., j] = x[.., idx[j]]`.
    pub fn select_last(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().ok_or_else(|| ManfError::shape("select_last", &s, &[]))?;
        let rows = numel(&s) / c;
        let flat = self.reshape(x, &[rows, 1, c])?;
        let n = idx.len();
        let g = self.gather_rows(flat, idx, n)?;
        let mut out = s;
        let l = out.len();
        out[l - 1] = n;
        self.reshape(g, &out)
    }

    /// Inverted dropout; identity outside training mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(ManfError::Contract(format!("dropout rate {rate} not in [0,1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        let n = self.nodes[x.0].value.len();
        let rng = self.rng.as_mut().expect("training tape carries an rng");
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
            .collect();
        let v = &self.nodes[x.0].value;
        let out = v.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Dropout(x, mask), rg))
    }

    /// Windowed relative-position attention scores for one head.
    ///
    /// For `qu, qv, kt: [B, T, m]` and `rt: [2·half+1, m]` (row `o + half`
    /// holds the projected encoding of offset `o`):
    ///
    /// `out[b,i,j] = scale · (qu[b,i]·kt[b,j] + qv[b,i]·rt[i−j+half])`
    /// when `|i − j| ≤ half`, else `fill` (`-inf` ahead of a softmax).
    #[allow(clippy::too_many_arguments)]
    pub fn rel_scores(
        &mut self,
        qu: Var,
        kt: Var,
        qv: Var,
        rt: Var,
        half: usize,
        scale: f64,
        fill: f64,
    ) -> Result<Var> {
        let s = self.shape(qu).to_vec();
        if s.len() != 3 || self.shape(kt) != s.as_slice() || self.shape(qv) != s.as_slice() {
            return Err(ManfError::shape("rel_scores", &s, self.shape(kt)));
        }
        let (b, t, m) = (s[0], s[1], s[2]);
        if self.shape(rt) != [2 * half + 1, m] {
            return Err(ManfError::shape("rel_scores", self.shape(rt), &[2 * half + 1, m]));
        }
        let vqu = &self.nodes[qu.0].value;
        let vkt = &self.nodes[kt.0].value;
        let vqv = &self.nodes[qv.0].value;
        let vrt = &self.nodes[rt.0].value;
        let r = 2 * half + 1;
        // position term for every (row, offset): P = qv · rtᵀ, [(B·T) × R]
        let mut pos = vec![0.0; b * t * r];
        gemm_nt(vqv, vrt, &mut pos, b * t, m, r);
        let mut content = vec![0.0; t * t];
        let mut out = vec![fill; b * t * t];
        for bi in 0..b {
            let rows = bi * t * m..(bi + 1) * t * m;
            content.iter_mut().for_each(|c| *c = 0.0);
            gemm_nt(&vqu[rows.clone()], &vkt[rows], &mut content, t, m, t);
            for i in 0..t {
                let prow = &pos[(bi * t + i) * r..(bi * t + i + 1) * r];
                let orow = &mut out[(bi * t + i) * t..(bi * t + i + 1) * t];
                for j in i.saturating_sub(half)..=(i + half).min(t - 1) {
                    orow[j] = scale * (content[i * t + j] + prow[i + half - j]);
                }
            }
        }
        let rg = self.rg(qu) || self.rg(kt) || self.rg(qv) || self.rg(rt);
        Ok(self.push(
            vec![b, t, t],
            out,
            Op::RelScores {
                qu,
                kt,
                qv,
                rt,
                half,
                scale,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------
    // reverse pass

    /// Accumulates d(loss)/d(node) into every node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(ManfError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut local);
            }
            // intermediates are dropped here so their buffers get reused
            if !matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            match self.grads[i].as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => self.grads[i] = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        macro_rules! with_sink {
            ($v:expr, |$buf:ident| $body:block) => {
                if let Some($buf) = sink(nodes, local, $v) $body
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let out = &node.shape;
                let va = &nodes[a.0].value;
                let vb = &nodes[b.0].value;
                let pa = Bcast::plan(out, &nodes[a.0].shape);
                let pb = Bcast::plan(out, &nodes[b.0].shape);
                with_sink!(*a, |ga| {
                    for (k, &gk) in g.iter().enumerate() {
                        let d = match kind {
                            Binary::Add | Binary::Sub => gk,
                            Binary::Mul => gk * vb[pb.index(k)],
                            Binary::Div => gk / vb[pb.index(k)],
                        };
                        ga[pa.index(k)] += d;
                    }
                });
                with_sink!(*b, |gb| {
                    for (k, &gk) in g.iter().enumerate() {
                        let d = match kind {
                            Binary::Add => gk,
                            Binary::Sub => -gk,
                            Binary::Mul => gk * va[pa.index(k)],
                            Binary::Div => {
                                let y = vb[pb.index(k)];
                                -gk * va[pa.index(k)] / (y * y)
                            }
                        };
                        gb[pb.index(k)] += d;
                    }
                });
            }
            Op::Unary(kind, x) => {
                let vx = &nodes[x.0].value;
                let y = &node.value;
                with_sink!(*x, |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k]
                            * match kind {
                                Unary::Exp => y[k],
                                Unary::Log => 1.0 / vx[k],
                                Unary::Tanh => 1.0 - y[k] * y[k],
                                Unary::Relu => {
                                    if vx[k] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Sqrt => 0.5 / y[k],
                                Unary::Square => 2.0 * vx[k],
                            };
                    }
                });
            }
            Op::Scale(x, c) => with_sink!(*x, |gx| {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
            }),
            Op::AddScalar(x) | Op::Reshape(x) => with_sink!(*x, |gx| {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }),
            Op::MatMul(a, b) => {
                let sa = &nodes[a.0].shape;
                let sb = &nodes[b.0].shape;
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let ba = &sa[..sa.len() - 2];
                let bb = &sb[..sb.len() - 2];
                let batch = &node.shape[..node.shape.len() - 2];
                let va = &nodes[a.0].value;
                let vb = &nodes[b.0].value;
                if bb.is_empty() {
                    let rows = numel(ba) * m;
                    with_sink!(*a, |ga| {
                        gemm_nt(g, vb, ga, rows, n, k);
                    });
                    with_sink!(*b, |gb| {
                        gemm_tn(va, g, gb, rows, k, n);
                    });
                } else {
                    let nb = numel(batch);
                    let pa = Bcast::plan(batch, ba);
                    let pb = Bcast::plan(batch, bb);
                    with_sink!(*a, |ga| {
                        for bi in 0..nb {
                            let ia = pa.index(bi);
                            let ib = pb.index(bi);
                            gemm_nt(
                                &g[bi * m * n..(bi + 1) * m * n],
                                &vb[ib * k * n..(ib + 1) * k * n],
                                &mut ga[ia * m * k..(ia + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    });
                    with_sink!(*b, |gb| {
                        for bi in 0..nb {
                            let ia = pa.index(bi);
                            let ib = pb.index(bi);
                            gemm_tn(
                                &va[ia * m * k..(ia + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut gb[ib * k * n..(ib + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    });
                }
            }
            Op::Transpose(x) => {
                // node shape is [.., c, r]; parent is [.., r, c]
                let s = &node.shape;
                let (c, r) = (s[s.len() - 2], s[s.len() - 1]);
                with_sink!(*x, |gx| {
                    for (src, dst) in g.chunks(r * c).zip(gx.chunks_mut(r * c)) {
                        for j in 0..c {
                            for i in 0..r {
                                dst[i * c + j] += src[j * r + i];
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => with_sink!(*x, |gx| {
                let g0 = g[0];
                gx.iter_mut().for_each(|a| *a += g0);
            }),
            Op::SumAxis(x, axis) => {
                let (outer, ext, inner) = split_axis(&nodes[x.0].shape, *axis);
                with_sink!(*x, |gx| {
                    for o in 0..outer {
                        for e in 0..ext {
                            let dst = &mut gx[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                            for (d, &s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += s;
                            }
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let c = *node.shape.last().unwrap();
                let y = &node.value;
                with_sink!(*x, |gx| {
                    for ((yr, gr), dst) in y.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dst[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::MaskFill(x, keep) => {
                let n = keep.len();
                with_sink!(*x, |gx| {
                    for (k, &gk) in g.iter().enumerate() {
                        if keep[k % n] {
                            gx[k] += gk;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = *node.shape.last().unwrap();
                let gam = &nodes[gamma.0].value;
                with_sink!(*gamma, |gg| {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                with_sink!(*beta, |gb| {
                    for gr in g.chunks(c) {
                        for j in 0..c {
                            gb[j] += gr[j];
                        }
                    }
                });
                with_sink!(*x, |gx| {
                    let cf = c as f64;
                    for (r, ((gr, hr), dst)) in g
                        .chunks(c)
                        .zip(xhat.chunks(c))
                        .zip(gx.chunks_mut(c))
                        .enumerate()
                    {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            dst[j] += rstd[r] * (dh - s1 / cf - hr[j] * s2 / cf);
                        }
                    }
                });
            }
            Op::Slice { x, axis, start } => {
                let (outer, ext, inner) = split_axis(&nodes[x.0].shape, *axis);
                let len = node.shape[*axis];
                with_sink!(*x, |gx| {
                    for o in 0..outer {
                        let base = (o * ext + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, s) in gx[base..base + len * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut off = 0;
                for &p in parts {
                    let ext = nodes[p.0].shape[*axis];
                    with_sink!(p, |gp| {
                        for o in 0..outer {
                            let src = &g[(o * total + off) * inner..(o * total + off + ext) * inner];
                            for (d, s) in gp[o * ext * inner..(o + 1) * ext * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    off += ext;
                }
            }
            Op::Gather { x, idx, cols_in } => {
                let s = &node.shape;
                let (r, co) = (s[s.len() - 2], s[s.len() - 1]);
                let ci = *cols_in;
                with_sink!(*x, |gx| {
                    let batch = g.len() / (r * co);
                    for b in 0..batch {
                        for row in 0..r {
                            let dst = &mut gx[(b * r + row) * ci..(b * r + row + 1) * ci];
                            let src = &g[(b * r + row) * co..(b * r + row + 1) * co];
                            for (j, &gj) in src.iter().enumerate() {
                                dst[idx[row * co + j]] += gj;
                            }
                        }
                    }
                });
            }
            Op::Dropout(x, mask) => with_sink!(*x, |gx| {
                for k in 0..g.len() {
                    gx[k] += g[k] * mask[k];
                }
            }),
            Op::RelScores {
                qu,
                kt,
                qv,
                rt,
                half,
                scale,
            } => {
                let sh = &nodes[qu.0].shape;
                let (b, t, m) = (sh[0], sh[1], sh[2]);
                let half = *half;
                let r = 2 * half + 1;
                // in-window upstream grads (scaled), and the same values
                // scattered to (row, offset) layout for the position term
                let mut gs = vec![0.0; b * t * t];
                let mut gp = vec![0.0; b * t * r];
                for bi in 0..b {
                    for i in 0..t {
                        let base = (bi * t + i) * t;
                        for j in i.saturating_sub(half)..=(i + half).min(t - 1) {
                            let v = g[base + j] * scale;
                            gs[base + j] = v;
                            gp[(bi * t + i) * r + i + half - j] = v;
                        }
                    }
                }
                let vqu = &nodes[qu.0].value;
                let vkt = &nodes[kt.0].value;
                let vqv = &nodes[qv.0].value;
                let vrt = &nodes[rt.0].value;
                let blk = |bi: usize| bi * t * m..(bi + 1) * t * m;
                let sblk = |bi: usize| bi * t * t..(bi + 1) * t * t;
                with_sink!(*qu, |gq| {
                    for bi in 0..b {
                        gemm(&gs[sblk(bi)], &vkt[blk(bi)], &mut gq[blk(bi)], t, t, m);
                    }
                });
                with_sink!(*kt, |gk| {
                    for bi in 0..b {
                        gemm_tn(&gs[sblk(bi)], &vqu[blk(bi)], &mut gk[blk(bi)], t, t, m);
                    }
                });
                with_sink!(*qv, |gq| { gemm(&gp, vrt, gq, b * t, r, m) });
                with_sink!(*rt, |gr| { gemm_tn(&gp, vqv, gr, b * t, r, m) });
            }
        }
    }
}
