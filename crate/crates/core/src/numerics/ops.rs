//! Dense kernels shared by every model in the crate.
//!
//! Matrices are row-major slices. Each forward kernel that participates in
//! training has a matching backward that accumulates into gradient buffers.

use crate::error::{PiernError, Result};

/// `c = op(a) * op(b) + beta * c` where `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a (m x k) * b (k x n)` into a fresh buffer.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, false, b, false, 0.0, &mut c);
    c
}

/// Row-wise affine map `y = x w + b` for `x: rows x fan_in`, `w: fan_in x fan_out`.
pub fn linear(x: &[f64], w: &[f64], b: Option<&[f64]>, rows: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * fan_out];
    if let Some(b) = b {
        for r in y.chunks_exact_mut(fan_out) {
            r.copy_from_slice(b);
        }
        gemm(rows, fan_in, fan_out, x, false, w, false, 1.0, &mut y);
    } else {
        gemm(rows, fan_in, fan_out, x, false, w, false, 0.0, &mut y);
    }
    y
}

/// Backward of [`linear`]: accumulates `dw`, `db` and returns `dx`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: Option<&mut [f64]>,
    rows: usize,
    fan_in: usize,
    fan_out: usize,
    need_dx: bool,
) -> Option<Vec<f64>> {
    gemm(fan_in, rows, fan_out, x, true, dy, false, 1.0, dw);
    if let Some(db) = db {
        for r in dy.chunks_exact(fan_out) {
            for (g, v) in db.iter_mut().zip(r) {
                *g += v;
            }
        }
    }
    if need_dx {
        let mut dx = vec![0.0; rows * fan_in];
        gemm(rows, fan_out, fan_in, dy, false, w, true, 0.0, &mut dx);
        Some(dx)
    } else {
        None
    }
}

/// Numerically stable softmax. Rejects non-finite input.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(PiernError::NonFinite("softmax input"));
    }
    if v.is_empty() {
        return Err(PiernError::Empty("softmax input"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Unchecked in-place softmax with max subtraction.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `log(sum(exp(v)))` computed stably.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity. Zero-norm vectors are rejected rather than yielding NaN.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(PiernError::Shape(format!(
            "cosine_sim lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(PiernError::ZeroNorm("cosine_sim"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub const LN_EPS: f64 = 1e-5;

/// Cached statistics from a layer-norm forward pass.
#[derive(Debug, Clone, Default)]
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Row-wise layer normalization with affine gain and bias.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], dim: usize) -> (Vec<f64>, LayerNormCache) {
    let rows = x.len() / dim;
    let mut y = vec![0.0; x.len()];
    let mut cache = LayerNormCache {
        xhat: vec![0.0; x.len()],
        inv_std: vec![0.0; rows],
    };
    for r in 0..rows {
        let xr = &x[r * dim..(r + 1) * dim];
        let mean = xr.iter().sum::<f64>() / dim as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        cache.inv_std[r] = inv;
        for i in 0..dim {
            let xh = (xr[i] - mean) * inv;
            cache.xhat[r * dim + i] = xh;
            y[r * dim + i] = xh * gain[i] + bias[i];
        }
    }
    (y, cache)
}

pub fn layer_norm_backward(
    dy: &[f64],
    gain: &[f64],
    cache: &LayerNormCache,
    dgain: &mut [f64],
    dbias: &mut [f64],
    dim: usize,
) -> Vec<f64> {
    let rows = dy.len() / dim;
    let mut dx = vec![0.0; dy.len()];
    let n = dim as f64;
    for r in 0..rows {
        let off = r * dim;
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for i in 0..dim {
            let g = dy[off + i] * gain[i];
            let xh = cache.xhat[off + i];
            dgain[i] += dy[off + i] * xh;
            dbias[i] += dy[off + i];
            sum_g += g;
            sum_gx += g * xh;
        }
        let inv = cache.inv_std[r];
        for i in 0..dim {
            let g = dy[off + i] * gain[i];
            let xh = cache.xhat[off + i];
            dx[off + i] = inv * (g - sum_g / n - xh * sum_gx / n);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_symmetric_pair() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_log_ratio() {
        let p = softmax(&[1f64.ln(), 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15);
        assert!((p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_nan() {
        assert!(matches!(softmax(&[0.0, f64::NAN]), Err(PiernError::NonFinite(_))));
        assert!(softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let u = [0.3, -1.2, 2.0];
        assert!((cosine_sim(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[3.0, 4.0], &[4.0, 3.0]).unwrap() - 0.96).abs() < 1e-15);
        assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(PiernError::ZeroNorm(_))));
    }

    #[test]
    fn gemm_transposes_agree() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let c = matmul(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = vec![0.0; 4];
        gemm(2, 3, 2, &at, true, &bt, true, 0.0, &mut c2);
        assert_eq!(c2, c);
    }

    #[test]
    fn activation_grads_match_differences() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8);
            let num = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((num - silu_grad(x)).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn softmax_is_normalized_and_shift_invariant(
            v in proptest::collection::vec(-50.0f64..50.0, 1..12),
            c in -100.0f64..100.0,
        ) {
            let p = softmax(&v).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn cosine_in_unit_interval(
            a in proptest::collection::vec(-5.0f64..5.0, 3),
            b in proptest::collection::vec(-5.0f64..5.0, 3),
        ) {
            prop_assume!(norm(&a) > 1e-6 && norm(&b) > 1e-6);
            let s = cosine_sim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
