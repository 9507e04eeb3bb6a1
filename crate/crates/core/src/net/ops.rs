//! Row-level kernels shared by the inference and training paths.
//!
//! Every output row is computed from its own input row with a fixed
//! summation order, so a row comes out bit-identical whether it is part of a
//! full sequence, a masked sequence, or an incremental cached step.

/// Dot product with four interleaved partial sums, combined in a fixed order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out[o] = b[o] + sum_i w[o * x.len() + i] * x[i]`, weights stored out-major.
pub fn linear(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    debug_assert_eq!(w.len(), n_in * out.len());
    for ((y, row), bias) in out.iter_mut().zip(w.chunks_exact(n_in)).zip(b) {
        *y = bias + dot(row, x);
    }
}

/// Backward of [`linear`]; accumulates into `dx`, `dw`, `db`.
pub fn linear_back(x: &[f64], w: &[f64], dy: &[f64], dx: &mut [f64], dw: &mut [f64], db: &mut [f64]) {
    let n_in = x.len();
    for (o, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        db[o] += g;
        let row = &w[o * n_in..(o + 1) * n_in];
        let drow = &mut dw[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            dx[i] += g * row[i];
            drow[i] += g * x[i];
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Layer norm of one row; returns `(mean, 1/std)` for the backward pass.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
    (mean, rstd)
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_back(x: &[f64], mean: f64, rstd: f64, gain: &[f64], dy: &[f64], dx: &mut [f64], dgain: &mut [f64], dbias: &mut [f64]) {
    let n = x.len() as f64;
    let mut sum_g = 0.0;
    let mut sum_gx = 0.0;
    for i in 0..x.len() {
        let xhat = (x[i] - mean) * rstd;
        let g = dy[i] * gain[i];
        dgain[i] += dy[i] * xhat;
        dbias[i] += dy[i];
        sum_g += g;
        sum_gx += g * xhat;
    }
    for i in 0..x.len() {
        let xhat = (x[i] - mean) * rstd;
        let g = dy[i] * gain[i];
        dx[i] += rstd * (g - sum_g / n - xhat * sum_gx / n);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh approximation of GELU.
pub fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

pub fn gelu_grad(u: f64) -> f64 {
    let inner = GELU_C * (u + 0.044715 * u * u * u);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Attention of one query (one head slice) over the keys listed by
/// `keys`, in ascending order. Writes the weighted value sum to `out` and the
/// normalized weights to `probs` (same order as `keys`).
#[allow(clippy::too_many_arguments)]
pub fn attend(
    q: &[f64],
    keys: &[usize],
    k_rows: &[f64],
    v_rows: &[f64],
    stride: usize,
    offset: usize,
    scale: f64,
    probs: &mut Vec<f64>,
    out: &mut [f64],
) {
    let dk = q.len();
    probs.clear();
    let mut max = f64::NEG_INFINITY;
    for &j in keys {
        let k = &k_rows[j * stride + offset..j * stride + offset + dk];
        let s = dot(q, k) * scale;
        max = max.max(s);
        probs.push(s);
    }
    let mut sum = 0.0;
    for p in probs.iter_mut() {
        *p = (*p - max).exp();
        sum += *p;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    out.iter_mut().for_each(|o| *o = 0.0);
    for (&j, &p) in keys.iter().zip(probs.iter()) {
        let v = &v_rows[j * stride + offset..j * stride + offset + dk];
        for (o, x) in out.iter_mut().zip(v) {
            *o += p * x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative() {
        for u in [-3.0, -0.5, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8);
        }
    }

    #[test]
    fn softplus_round_trip() {
        for y in [0.01, 0.5, 0.99, 3.0, 40.0] {
            assert!((softplus(inverse_softplus(y)) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_backward_matches_differences() {
        let x = [0.3, -1.2, 2.0, 0.7];
        let g = [1.1, 0.9, 1.3, 0.5];
        let b = [0.0, 0.1, -0.2, 0.3];
        let dy = [0.2, -0.4, 0.9, 1.5];
        let loss = |x: &[f64]| {
            let mut y = [0.0; 4];
            layer_norm(x, &g, &b, &mut y);
            y.iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut y = [0.0; 4];
        let (m, r) = layer_norm(&x, &g, &b, &mut y);
        let (mut dx, mut dg, mut db) = ([0.0; 4], [0.0; 4], [0.0; 4]);
        layer_norm_back(&x, m, r, &g, &dy, &mut dx, &mut dg, &mut db);
        for i in 0..4 {
            let (mut p, mut q) = (x, x);
            p[i] += 1e-6;
            q[i] -= 1e-6;
            let fd = (loss(&p) - loss(&q)) / 2e-6;
            assert!((fd - dx[i]).abs() < 1e-7, "{i}: {fd} vs {}", dx[i]);
        }
    }
}
