//! Dense row-major kernels with their backward passes.

use crate::scalar::Scalar;

/// `out[n×m] = a[n×k] · w[k×m] (+ bias)`.
pub fn matmul<T: Scalar>(a: &[T], n: usize, k: usize, w: &[T], m: usize, bias: Option<&[T]>, out: &mut [T]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(w.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        match bias {
            Some(b) => row.copy_from_slice(b),
            None => row.fill(T::zero()),
        }
        for (kk, &x) in a[i * k..(i + 1) * k].iter().enumerate() {
            if x == T::zero() {
                continue;
            }
            let wrow = &w[kk * m..(kk + 1) * m];
            for (o, &wv) in row.iter_mut().zip(wrow) {
                *o += x * wv;
            }
        }
    }
}

/// Accumulate gradients of `out = a·w + b` given `dout`.
/// `da += dout·wᵀ`, `dw += aᵀ·dout`, `db += Σ_rows dout`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward<T: Scalar>(
    a: &[T],
    n: usize,
    k: usize,
    w: &[T],
    m: usize,
    dout: &[T],
    da: Option<&mut [T]>,
    dw: &mut [T],
    db: Option<&mut [T]>,
) {
    for i in 0..n {
        let drow = &dout[i * m..(i + 1) * m];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &x) in arow.iter().enumerate() {
            if x == T::zero() {
                continue;
            }
            let dwrow = &mut dw[kk * m..(kk + 1) * m];
            for (g, &d) in dwrow.iter_mut().zip(drow) {
                *g += x * d;
            }
        }
    }
    if let Some(db) = db {
        for i in 0..n {
            for (g, &d) in db.iter_mut().zip(&dout[i * m..(i + 1) * m]) {
                *g += d;
            }
        }
    }
    if let Some(da) = da {
        for i in 0..n {
            let drow = &dout[i * m..(i + 1) * m];
            for kk in 0..k {
                let wrow = &w[kk * m..(kk + 1) * m];
                let mut acc = T::zero();
                for (&wv, &d) in wrow.iter().zip(drow) {
                    acc += wv * d;
                }
                da[i * k + kk] += acc;
            }
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

pub struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Scalar>(x: &[T], d: usize, gamma: &[T], beta: &[T], out: &mut [T]) -> LayerNormCache<T> {
    let n = x.len() / d;
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); n];
    let dn = T::of(d as f64);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let r = T::one() / (var + T::of(LN_EPS)).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            out[i * d + j] = gamma[j] * h + beta[j];
        }
    }
    LayerNormCache { xhat, rstd }
}

pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    d: usize,
    gamma: &[T],
    dout: &[T],
    dx: &mut [T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) {
    let n = cache.rstd.len();
    let dn = T::of(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for i in 0..n {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let dy = &dout[i * d..(i + 1) * d];
        let mut sum = T::zero();
        let mut sum_x = T::zero();
        for j in 0..d {
            dgamma[j] += dy[j] * xh[j];
            dbeta[j] += dy[j];
            dxhat[j] = dy[j] * gamma[j];
            sum += dxhat[j];
            sum_x += dxhat[j] * xh[j];
        }
        let r = cache.rstd[i];
        for j in 0..d {
            dx[i * d + j] += r / dn * (dn * dxhat[j] - sum - xh[j] * sum_x);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_K) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_K) * x * x * x);
    let t = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_K) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
}

/// In-place softmax of a row.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Fixed sinusoidal position table, `max_len × hidden`.
pub fn sinusoidal_positions<T: Scalar>(max_len: usize, hidden: usize) -> Vec<T> {
    let mut table = vec![T::zero(); max_len * hidden];
    for pos in 0..max_len {
        for i in 0..hidden {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / hidden as f64);
            table[pos * hidden + i] = T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    table
}
