//! Row-wise kernels with hand-written backward passes.

use super::real::Real;

pub const LN_EPS: f64 = 1e-6;

/// Per-row normalized input and inverse standard deviation, kept for backward.
#[derive(Clone, Debug, Default)]
pub struct LnCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// `out = γ · (x − μ)/σ + β` for every row of a `rows × d` matrix.
pub fn layer_norm<T: Real>(x: &[T], gamma: &[T], beta: &[T], d: usize, out: &mut [T], cache: Option<&mut LnCache<T>>) {
    let rows = x.len() / d;
    let eps = T::lit(LN_EPS);
    let inv_d = T::one() / T::lit(d as f64);
    let mut cache = cache;
    if let Some(c) = cache.as_deref_mut() {
        c.xhat.resize(x.len(), T::zero());
        c.rstd.resize(rows, T::zero());
    }
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = (var + eps).sqrt().recip();
        let o = &mut out[r * d..(r + 1) * d];
        for i in 0..d {
            let xh = (row[i] - mean) * rstd;
            o[i] = xh * gamma[i] + beta[i];
        }
        if let Some(c) = cache.as_deref_mut() {
            c.rstd[r] = rstd;
            for i in 0..d {
                c.xhat[r * d + i] = (row[i] - mean) * rstd;
            }
        }
    }
}

/// Accumulates γ/β gradients and writes `dx` (overwriting).
pub fn layer_norm_backward<T: Real>(dy: &[T], cache: &LnCache<T>, gamma: &[T], d: usize, dgamma: &mut [T], dbeta: &mut [T], dx: &mut [T]) {
    let rows = dy.len() / d;
    let inv_d = T::one() / T::lit(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for i in 0..d {
            dgamma[i] += dyr[i] * xh[i];
            dbeta[i] += dyr[i];
            dxhat[i] = dyr[i] * gamma[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xh[i];
        }
        mean_dxhat = mean_dxhat * inv_d;
        mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
        let rstd = cache.rstd[r];
        for i in 0..d {
            dx[r * d + i] = rstd * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

/// tanh-approximated GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// In-place row softmax over a `rows × n` matrix.
pub fn softmax_rows<T: Real>(s: &mut [T], n: usize) {
    for row in s.chunks_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = sum.recip();
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

/// Given probabilities `p` and upstream `dp`, overwrites `dp` with the
/// gradient w.r.t. the logits: `p ⊙ (dp − Σ dp⊙p)`.
pub fn softmax_rows_backward<T: Real>(p: &[T], dp: &mut [T], n: usize) {
    for (pr, dr) in p.chunks(n).zip(dp.chunks_mut(n)) {
        let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
        for (d, &pv) in dr.iter_mut().zip(pr) {
            *d = pv * (*d - dot);
        }
    }
}

/// Adds `bias` to every row.
pub fn add_bias<T: Real>(x: &mut [T], bias: &[T]) {
    let d = bias.len();
    for row in x.chunks_mut(d) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Accumulates column sums of `dy` into `dbias`.
pub fn bias_grad<T: Real>(dy: &[T], dbias: &mut [T]) {
    let d = dbias.len();
    for row in dy.chunks(d) {
        for (g, &v) in dbias.iter_mut().zip(row) {
            *g += v;
        }
    }
}
