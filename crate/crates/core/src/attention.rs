//! Multi-scale windowed attention with relative positions, the residual
//! transformer layer built on it, and the vanilla cross-attention layer used
//! by the decoder.
//!
//! Activations are `[B, T, d]`. For a query at position `i` and half-window
//! `θ`, keys are restricted to `[max(0, i−θ), min(T−1, i+θ)]`; windows are
//! clamped at sequence edges rather than padded. Scores per head are
//!
//! ```text
//! (q_i + u)ᵀ W_k k_j + (q_i + v)ᵀ W_k R_{i−j}
//! ```
//!
//! with `R` a sinusoidal offset table projected by a per-layer `W_r`, and
//! `u`, `v` learned per layer and per head.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{ManfError, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Tape, Var};

/// Half-window per encoder layer, smallest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScaleSet(Vec<usize>);

impl ScaleSet {
    pub fn new(half_windows: Vec<usize>) -> Result<Self> {
        if half_windows.is_empty() {
            return Err(ManfError::Empty("scale set".into()));
        }
        if half_windows.contains(&0) {
            return Err(ManfError::Contract("scale half-windows must be positive".into()));
        }
        if half_windows.windows(2).any(|w| w[0] > w[1]) {
            return Err(ManfError::Contract(format!(
                "scale set must be nondecreasing, got {half_windows:?}"
            )));
        }
        Ok(ScaleSet(half_windows))
    }

    /// `[⌈L/3⌉, ⌈L/2⌉, L]` with `L = 4 · horizon`.
    pub fn for_horizon(horizon: usize) -> Self {
        Self::for_context(4 * horizon, 3)
    }

    /// `Θ_i = ⌈L / (layers + 1 − i)⌉` for `i = 1..=layers`, which gives
    /// `[⌈L/3⌉, ⌈L/2⌉, L]` at depth 3.
    pub fn for_context(context: usize, layers: usize) -> Self {
        ScaleSet((1..=layers).map(|i| context.div_ceil(layers + 1 - i).max(1)).collect())
    }

    pub fn half_windows(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Boundary-clamped window `x[max(0, i−θ) ..= min(T−1, i+θ)]`.
pub fn window<T>(x: &[T], i: usize, theta: usize) -> Result<&[T]> {
    if i >= x.len() {
        return Err(ManfError::Index { index: i, len: x.len() });
    }
    let lo = i.saturating_sub(theta);
    let hi = (i + theta).min(x.len() - 1);
    Ok(&x[lo..=hi])
}

/// Sinusoidal encodings of (possibly negative) positions, row-major
/// `positions.len() × dim`.
pub fn sinusoidal(positions: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; positions.len() * dim];
    for (r, &p) in positions.iter().enumerate() {
        for c in 0..dim {
            let freq = 10000f64.powf(-((c / 2 * 2) as f64) / dim as f64);
            out[r * dim + c] = if c % 2 == 0 { (p * freq).sin() } else { (p * freq).cos() };
        }
    }
    out
}

/// Sinusoidal table over offsets `-max_offset ..= max_offset`.
#[derive(Debug, Clone)]
pub struct RelPosTable {
    max_offset: usize,
    dim: usize,
    data: Vec<f64>,
}

impl RelPosTable {
    pub fn new(max_offset: usize, dim: usize) -> Self {
        let m = max_offset as i64;
        let positions: Vec<f64> = (-m..=m).map(|o| o as f64).collect();
        RelPosTable {
            max_offset,
            dim,
            data: sinusoidal(&positions, dim),
        }
    }

    pub fn max_offset(&self) -> usize {
        self.max_offset
    }

    /// Rows for offsets `-half ..= half`, `(2·half+1) × dim`.
    pub fn rows(&self, half: usize) -> Result<Vec<f64>> {
        if half > self.max_offset {
            return Err(ManfError::TableSize {
                offset: half,
                max: self.max_offset,
            });
        }
        let start = (self.max_offset - half) * self.dim;
        Ok(self.data[start..start + (2 * half + 1) * self.dim].to_vec())
    }

    /// Encoding of a single offset.
    pub fn row(&self, offset: i64) -> Result<&[f64]> {
        if offset.unsigned_abs() as usize > self.max_offset {
            return Err(ManfError::TableSize {
                offset: offset.unsigned_abs() as usize,
                max: self.max_offset,
            });
        }
        let r = (offset + self.max_offset as i64) as usize;
        Ok(&self.data[r * self.dim..(r + 1) * self.dim])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionOptions {
    /// Divide scores by `√m`.
    pub scaled: bool,
    /// Skip the per-window softmax and use scores as weights directly.
    pub raw_scores: bool,
    pub dropout: f64,
}

impl Default for AttentionOptions {
    fn default() -> Self {
        AttentionOptions {
            scaled: true,
            raw_scores: false,
            dropout: 0.1,
        }
    }
}

/// Relative-position scores of one query against its window, unbatched.
///
/// `keys` and `rel` are row-major `n × m`: `rel[j]` is the encoding of the
/// offset between the query and `keys[j]`. `w_k` is `m × m` and acts as
/// `(q + u)ᵀ W_k k`.
#[allow(clippy::too_many_arguments)]
pub fn rel_scores(
    q: &[f64],
    keys: &[f64],
    rel: &[f64],
    u: &[f64],
    v: &[f64],
    w_k: &[f64],
    scaled: bool,
) -> Vec<f64> {
    let m = q.len();
    let n = keys.len() / m;
    let apply = |x: &[f64]| -> Vec<f64> {
        (0..m)
            .map(|r| (0..m).map(|c| w_k[r * m + c] * x[c]).sum())
            .collect()
    };
    let scale = if scaled { 1.0 / (m as f64).sqrt() } else { 1.0 };
    (0..n)
        .map(|j| {
            let wk = apply(&keys[j * m..(j + 1) * m]);
            let wr = apply(&rel[j * m..(j + 1) * m]);
            let content: f64 = (0..m).map(|c| (q[c] + u[c]) * wk[c]).sum();
            let position: f64 = (0..m).map(|c| (q[c] + v[c]) * wr[c]).sum();
            scale * (content + position)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    fn new(store: &mut ParamStore, prefix: &str, dim: usize, inner: usize, rng: &mut Rng) -> Self {
        FeedForward {
            w1: store.add_xavier(format!("{prefix}.ffn.w1"), dim, inner, rng),
            b1: store.add_zeros(format!("{prefix}.ffn.b1"), &[inner]),
            w2: store.add_xavier(format!("{prefix}.ffn.w2"), inner, dim, rng),
            b2: store.add_zeros(format!("{prefix}.ffn.b2"), &[dim]),
        }
    }

    /// `max(0, x W1 + b1) W2 + b2`, position-wise.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, dropout: f64) -> Result<Var> {
        let h = tape.matmul(x, p[self.w1])?;
        let h = tape.add(h, p[self.b1])?;
        let h = tape.relu(h)?;
        let h = tape.dropout(h, dropout)?;
        let o = tape.matmul(h, p[self.w2])?;
        tape.add(o, p[self.b2])
    }
}

#[derive(Debug, Clone)]
struct RelHead {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    /// Position-branch key map, stored transposed (`k_row · wkr`).
    wkr: ParamId,
    u: ParamId,
    v: ParamId,
}

/// Per-head attention weights, `[B, T, T_keys]` each.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// One multi-scale transformer layer:
/// `O = LayerNorm(H + ReLU(A(H, θ)))`, `H' = FFN(O)`.
#[derive(Debug, Clone)]
pub struct MultiScaleLayer {
    heads: Vec<RelHead>,
    w_r: ParamId,
    wo: ParamId,
    ln_gamma: ParamId,
    ln_beta: ParamId,
    ffn: FeedForward,
    dim: usize,
    head_dim: usize,
}

impl MultiScaleLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(ManfError::Contract(format!(
                "hidden dim {dim} not divisible by {heads} heads"
            )));
        }
        if ffn_dim < dim {
            return Err(ManfError::Contract(format!(
                "ffn dim {ffn_dim} smaller than hidden dim {dim}"
            )));
        }
        let m = dim / heads;
        let heads = (0..heads)
            .map(|h| {
                let p = format!("{prefix}.head{h}");
                RelHead {
                    wq: store.add_xavier(format!("{p}.wq"), dim, m, rng),
                    wk: store.add_xavier(format!("{p}.wk"), dim, m, rng),
                    wv: store.add_xavier(format!("{p}.wv"), dim, m, rng),
                    wkr: store.add_xavier(format!("{p}.wkr"), m, m, rng),
                    u: store.add_zeros(format!("{p}.u"), &[m]),
                    v: store.add_zeros(format!("{p}.v"), &[m]),
                }
            })
            .collect();
        Ok(MultiScaleLayer {
            heads,
            w_r: store.add_xavier(format!("{prefix}.w_r"), dim, dim, rng),
            wo: store.add_xavier(format!("{prefix}.wo"), dim, dim, rng),
            ln_gamma: store.add_ones(format!("{prefix}.ln.gamma"), &[dim]),
            ln_beta: store.add_zeros(format!("{prefix}.ln.beta"), &[dim]),
            ffn: FeedForward::new(store, prefix, dim, ffn_dim, rng),
            dim,
            head_dim: m,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Windowed multi-head attention `A(H, θ)`; `x` is `[B, T, d]`.
    pub fn attention(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        theta: usize,
        table: &RelPosTable,
        opts: &AttentionOptions,
    ) -> Result<AttentionTrace> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return Err(ManfError::shape("multi_scale_attention", &s, &[self.dim]));
        }
        let t = s[1];
        let half = theta.min(t - 1);
        let rel_base = tape.constant(&[2 * half + 1, self.dim], table.rows(half)?)?;
        let rel = tape.matmul(rel_base, p[self.w_r])?;
        let m = self.head_dim;
        let scale = if opts.scaled { 1.0 / (m as f64).sqrt() } else { 1.0 };
        let fill = if opts.raw_scores { 0.0 } else { f64::NEG_INFINITY };
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut weights = Vec::with_capacity(self.heads.len());
        // One wide projection for every head's q, k, v, sliced afterwards.
        let mut ws = Vec::with_capacity(3 * self.heads.len());
        for head in &self.heads {
            ws.extend([p[head.wq], p[head.wk], p[head.wv]]);
        }
        let w_all = tape.concat(&ws, 1)?;
        let qkv = tape.matmul(x, w_all)?;
        for (h, head) in self.heads.iter().enumerate() {
            let q = tape.slice(qkv, 2, 3 * h * m, m)?;
            let k = tape.slice(qkv, 2, (3 * h + 1) * m, m)?;
            let v = tape.slice(qkv, 2, (3 * h + 2) * m, m)?;
            let kt = tape.matmul(k, p[head.wkr])?;
            let rel_h = tape.slice(rel, 1, h * m, m)?;
            let rt = tape.matmul(rel_h, p[head.wkr])?;
            let qu = tape.add(q, p[head.u])?;
            let qv = tape.add(q, p[head.v])?;
            let scores = tape.rel_scores(qu, kt, qv, rt, half, scale, fill)?;
            let w = if opts.raw_scores { scores } else { tape.softmax(scores)? };
            weights.push(w);
            outs.push(tape.matmul(w, v)?);
        }
        let cat = tape.concat(&outs, 2)?;
        let output = tape.matmul(cat, p[self.wo])?;
        Ok(AttentionTrace { output, weights })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        theta: usize,
        table: &RelPosTable,
        opts: &AttentionOptions,
    ) -> Result<Var> {
        let a = self.attention(tape, p, x, theta, table, opts)?.output;
        let a = tape.dropout(a, opts.dropout)?;
        let a = tape.relu(a)?;
        let r = tape.add(x, a)?;
        let o = tape.layer_norm(r, p[self.ln_gamma], p[self.ln_beta], LN_EPS)?;
        self.ffn.forward(tape, p, o, opts.dropout)
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Runs the encoder stack, layer `i` at half-window `scales[i]`.
pub fn encoder_forward(
    tape: &mut Tape,
    p: &Bound,
    input: Var,
    scales: &ScaleSet,
    layers: &[MultiScaleLayer],
    table: &RelPosTable,
    opts: &AttentionOptions,
) -> Result<Var> {
    if layers.len() != scales.len() {
        return Err(ManfError::Contract(format!(
            "{} encoder layers for {} scales",
            layers.len(),
            scales.len()
        )));
    }
    let mut h = input;
    for (layer, &theta) in layers.iter().zip(scales.half_windows()) {
        h = layer.forward(tape, p, h, theta, table, opts)?;
    }
    Ok(h)
}

#[derive(Debug, Clone)]
struct Head {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

/// Decoder layer: full attention from decoder queries onto encoder memory,
/// wrapped in the same residual/LayerNorm/FFN form as [`MultiScaleLayer`].
#[derive(Debug, Clone)]
pub struct CrossAttentionLayer {
    heads: Vec<Head>,
    wo: ParamId,
    ln_gamma: ParamId,
    ln_beta: ParamId,
    ffn: FeedForward,
    dim: usize,
    head_dim: usize,
}

impl CrossAttentionLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(ManfError::Contract(format!(
                "hidden dim {dim} not divisible by {heads} heads"
            )));
        }
        let m = dim / heads;
        let heads = (0..heads)
            .map(|h| {
                let p = format!("{prefix}.head{h}");
                Head {
                    wq: store.add_xavier(format!("{p}.wq"), dim, m, rng),
                    wk: store.add_xavier(format!("{p}.wk"), dim, m, rng),
                    wv: store.add_xavier(format!("{p}.wv"), dim, m, rng),
                }
            })
            .collect();
        Ok(CrossAttentionLayer {
            heads,
            wo: store.add_xavier(format!("{prefix}.wo"), dim, dim, rng),
            ln_gamma: store.add_ones(format!("{prefix}.ln.gamma"), &[dim]),
            ln_beta: store.add_zeros(format!("{prefix}.ln.beta"), &[dim]),
            ffn: FeedForward::new(store, prefix, dim, ffn_dim, rng),
            dim,
            head_dim: m,
        })
    }

    /// `queries: [B, k, d]`, `memory: [B, S, d]`, optional `pe: [k, d]`
    /// added to the queries before attending.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        queries: Var,
        memory: Var,
        pe: Option<Var>,
        opts: &AttentionOptions,
    ) -> Result<Var> {
        let sq = tape.shape(queries).to_vec();
        let sm = tape.shape(memory).to_vec();
        if sq.len() != 3 || sm.len() != 3 || sq[0] != sm[0] || sq[2] != self.dim || sm[2] != self.dim {
            return Err(ManfError::shape("cross_attention", &sq, &sm));
        }
        let hq = match pe {
            Some(pe) => tape.add(queries, pe)?,
            None => queries,
        };
        let scale = if opts.scaled {
            1.0 / (self.head_dim as f64).sqrt()
        } else {
            1.0
        };
        let m = self.head_dim;
        let wq: Vec<Var> = self.heads.iter().map(|hd| p[hd.wq]).collect();
        let mut wkv = Vec::with_capacity(2 * self.heads.len());
        for head in &self.heads {
            wkv.extend([p[head.wk], p[head.wv]]);
        }
        let wq = tape.concat(&wq, 1)?;
        let wkv = tape.concat(&wkv, 1)?;
        let q_all = tape.matmul(hq, wq)?;
        let kv_all = tape.matmul(memory, wkv)?;
        let mut outs = Vec::with_capacity(self.heads.len());
        for h in 0..self.heads.len() {
            let q = tape.slice(q_all, 2, h * m, m)?;
            let k = tape.slice(kv_all, 2, 2 * h * m, m)?;
            let v = tape.slice(kv_all, 2, (2 * h + 1) * m, m)?;
            let kt = tape.transpose(k)?;
            let s = tape.matmul(q, kt)?;
            let s = tape.scale(s, scale);
            let w = if opts.raw_scores { s } else { tape.softmax(s)? };
            outs.push(tape.matmul(w, v)?);
        }
        let cat = tape.concat(&outs, 2)?;
        let a = tape.matmul(cat, p[self.wo])?;
        let a = tape.dropout(a, opts.dropout)?;
        let a = tape.relu(a)?;
        let r = tape.add(hq, a)?;
        let o = tape.layer_norm(r, p[self.ln_gamma], p[self.ln_beta], LN_EPS)?;
        self.ffn.forward(tape, p, o, opts.dropout)
    }
}

/// Keep-mask over a `T × T` score matrix for half-window `theta`.
pub fn window_mask(t: usize, theta: usize) -> Rc<Vec<bool>> {
    let mut keep = vec![false; t * t];
    for i in 0..t {
        let lo = i.saturating_sub(theta);
        let hi = (i + theta).min(t - 1);
        for j in lo..=hi {
            keep[i * t + j] = true;
        }
    }
    Rc::new(keep)
}
