//! Row kernels shared by the training forward pass and the incremental
//! decoder. Both paths call the same functions in the same order, so they
//! produce bit-identical activations.

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Dot product with eight independent accumulators (fixed order, so
/// deterministic, and vectorizable).
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y = bias + x W` with `W` stored row-major as `[x.len(), y.len()]`.
#[inline]
pub(crate) fn affine(x: &[f64], w: &[f64], bias: Option<&[f64]>, y: &mut [f64]) {
    let dout = y.len();
    match bias {
        Some(b) => y.copy_from_slice(b),
        None => y.fill(0.0),
    }
    for (i, &xi) in x.iter().enumerate() {
        axpy(xi, &w[i * dout..(i + 1) * dout], y);
    }
}

/// Backward of [`affine`]: accumulates `dW += x^T dy`, `db += dy` and
/// `dx += W dy`.
#[inline]
pub(crate) fn affine_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: Option<&mut [f64]>,
    dx: Option<&mut [f64]>,
) {
    let dout = dy.len();
    if let Some(db) = db {
        axpy(1.0, dy, db);
    }
    for (i, &xi) in x.iter().enumerate() {
        axpy(xi, dy, &mut dw[i * dout..(i + 1) * dout]);
    }
    if let Some(dx) = dx {
        for (i, dxi) in dx.iter_mut().enumerate() {
            *dxi += dot(&w[i * dout..(i + 1) * dout], dy);
        }
    }
}

/// Layer norm with gain parameterized as `1 + g`. Writes the normalized
/// input to `xhat` and returns the reciprocal standard deviation.
#[inline]
pub(crate) fn layer_norm(x: &[f64], g: &[f64], b: &[f64], xhat: &mut [f64], y: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
        y[i] = xhat[i] * (1.0 + g[i]) + b[i];
    }
    rstd
}

#[inline]
pub(crate) fn layer_norm_backward(
    xhat: &[f64],
    rstd: f64,
    g: &[f64],
    dy: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    let n = xhat.len() as f64;
    let mut mean_d = 0.0;
    let mut mean_dx = 0.0;
    for i in 0..xhat.len() {
        let d = dy[i] * (1.0 + g[i]);
        dg[i] += dy[i] * xhat[i];
        db[i] += dy[i];
        mean_d += d;
        mean_dx += d * xhat[i];
    }
    mean_d /= n;
    mean_dx /= n;
    for i in 0..xhat.len() {
        let d = dy[i] * (1.0 + g[i]);
        dx[i] += rstd * (d - mean_d - xhat[i] * mean_dx);
    }
}

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// In-place softmax; returns `ln(sum(exp(x - max)))` and the max.
#[inline]
pub(crate) fn softmax_in_place(x: &mut [f64]) -> (f64, f64) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in x.iter_mut() {
        *v *= inv;
    }
    (sum.ln(), max)
}

/// Causal attention for one query position over `keys`/`values` rows
/// `0..=t` of a `[T, 3d]` or `[T, d]` buffer. `probs` receives the
/// attention weights per head, laid out `[n_heads, t + 1]`.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn attend(
    q: &[f64],
    k_rows: &[f64],
    v_rows: &[f64],
    stride: usize,
    n_keys: usize,
    n_heads: usize,
    probs: &mut [f64],
    out: &mut [f64],
) {
    let d = q.len();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    out.fill(0.0);
    for h in 0..n_heads {
        let qh = &q[h * hd..(h + 1) * hd];
        let p = &mut probs[h * n_keys..(h + 1) * n_keys];
        for (j, pj) in p.iter_mut().enumerate() {
            *pj = dot(qh, &k_rows[j * stride + h * hd..j * stride + (h + 1) * hd]) * scale;
        }
        softmax_in_place(p);
        let oh = &mut out[h * hd..(h + 1) * hd];
        for (j, &pj) in p.iter().enumerate() {
            axpy(pj, &v_rows[j * stride + h * hd..j * stride + (h + 1) * hd], oh);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..19).map(|i| i as f64 * 0.5 - 3.0).collect();
        let b: Vec<f64> = (0..19).map(|i| (i as f64).sin()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_normalizes() {
        let mut x = vec![1000.0, 999.0, -5.0];
        softmax_in_place(&mut x);
        assert!((x.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
