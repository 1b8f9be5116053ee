use crate::error::{ManfError, Result};

/// Trailing-dimension broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(ManfError::shape("broadcast", a, b)),
        };
    }
    Ok(out)
}

/// How an input's flat index is derived from an output flat index.
pub(crate) enum Bcast {
    Same,
    Scalar,
    /// Input equals the trailing block of the output: `i % n`.
    Suffix(usize),
    General(Vec<usize>),
}

impl Bcast {
    pub(crate) fn plan(out: &[usize], inp: &[usize]) -> Bcast {
        let n_in: usize = inp.iter().product();
        if inp == out {
            return Bcast::Same;
        }
        if n_in == 1 {
            return Bcast::Scalar;
        }
        let stripped: Vec<usize> = inp.iter().copied().skip_while(|&d| d == 1).collect();
        if stripped.len() <= out.len() && out[out.len() - stripped.len()..] == stripped[..] {
            return Bcast::Suffix(n_in);
        }
        Bcast::General(general_index(out, inp))
    }

    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Suffix(n) => i % n,
            Bcast::General(v) => v[i],
        }
    }
}

fn general_index(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - inp.len();
    // input stride per output axis (0 where broadcast)
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for ax in (0..rank).rev() {
        if ax >= pad {
            let d = inp[ax - pad];
            strides[ax] = if d == 1 { 0 } else { s };
            s *= d;
        }
    }
    let n: usize = out.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..n {
        idx.push(cur);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            cur += strides[ax];
            if counter[ax] < out[ax] {
                break;
            }
            cur -= strides[ax] * out[ax];
            counter[ax] = 0;
        }
    }
    idx
}

// All three products go through `matrixmultiply::dgemm`, which computes
// `C ← α·A·B + β·C` for arbitrary row/column strides, so transposed operands
// cost nothing. With β = 1 every call accumulates into `c`.

/// `c += a · b` for row-major `a: m×k`, `b: k×n`.
pub(crate) fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if narrow(k, n) {
        return narrow_gemm(a, b, c, m, k, n);
    }
    // SAFETY: the assertion bounds every index dgemm touches for these
    // dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c += g · bᵀ` for `g: m×n`, `b: k×n`, `c: m×k`.
pub(crate) fn gemm_nt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    assert!(g.len() >= m * n && b.len() >= k * n && c.len() >= m * k);
    // SAFETY: as in `gemm`; bᵀ is read through swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            m, n, k, 1.0,
            g.as_ptr(), n as isize, 1,
            b.as_ptr(), 1, n as isize,
            1.0,
            c.as_mut_ptr(), k as isize, 1,
        );
    }
}

/// `c += aᵀ · g` for `a: m×k`, `g: m×n`, `c: k×n`.
pub(crate) fn gemm_tn(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && g.len() >= m * n && c.len() >= k * n);
    // SAFETY: as in `gemm`; aᵀ is read through swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            k, m, n, 1.0,
            a.as_ptr(), 1, k as isize,
            g.as_ptr(), n as isize, 1,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

// Products with a long inner dimension but only a few output columns (one
// attention head wide) spend most of their time in dgemm's packing of the
// large operand. A direct loop that keeps each output row in registers
// streams that operand once instead. It only pays off when `a` is read
// along rows, so transposed operands stay with dgemm.

fn narrow(inner: usize, n: usize) -> bool {
    inner >= 32 && matches!(n, 1 | 2 | 4 | 8 | 16)
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n` with `n` a small power of two.
fn narrow_gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were just detected.
            return unsafe { narrow_fma(a, b, c, m, k, n) };
        }
    }
    match n {
        1 => narrow_body::<1>(a, b, c, m, k, |x, y, z| x * y + z),
        2 => narrow_body::<2>(a, b, c, m, k, |x, y, z| x * y + z),
        4 => narrow_body::<4>(a, b, c, m, k, |x, y, z| x * y + z),
        8 => narrow_body::<8>(a, b, c, m, k, |x, y, z| x * y + z),
        _ => narrow_body::<16>(a, b, c, m, k, |x, y, z| x * y + z),
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn narrow_fma(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    match n {
        1 => narrow_body::<1>(a, b, c, m, k, f64::mul_add),
        2 => narrow_body::<2>(a, b, c, m, k, f64::mul_add),
        4 => narrow_body::<4>(a, b, c, m, k, f64::mul_add),
        8 => narrow_body::<8>(a, b, c, m, k, f64::mul_add),
        _ => narrow_body::<16>(a, b, c, m, k, f64::mul_add),
    }
}

#[inline(always)]
fn narrow_body<const N: usize>(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, fma: impl Fn(f64, f64, f64) -> f64) {
    for (arow, crow) in a.chunks_exact(k).zip(c.chunks_exact_mut(N)).take(m) {
        let mut acc = [0.0f64; N];
        for (&x, row) in arow.iter().zip(b.chunks_exact(N)) {
            for j in 0..N {
                acc[j] = fma(x, row[j], acc[j]);
            }
        }
        for (cj, aj) in crow.iter_mut().zip(acc) {
            *cj += aj;
        }
    }
}
