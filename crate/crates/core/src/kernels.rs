//! Numeric kernels.
//!
//! The slice-level functions are generic over [`Real`] and shared by the
//! autodiff graph, so the `f32` tensor entry points and the recorded forward
//! pass compute bit-identical values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    pub fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Activation::Gelu => gelu_grad(x),
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    // Branch on sign so neither exp overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Exact GELU: `x·Φ(x)` with Φ the standard normal CDF.
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    x * half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::of(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// `c = a·b` for row-major `a: m×k`, `b: k×n`.
pub fn matmul_into<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    c.iter_mut().for_each(|x| *x = T::zero());
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (t, &a_it) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_it == T::zero() {
                continue;
            }
            let b_row = &b[t * n..(t + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj = *cj + a_it * bj;
            }
        }
    }
}

/// `c += aᵀ·b` for `a: m×k`, `b: m×n`, `c: k×n`.
pub fn matmul_tn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for t in 0..k {
            let a_it = a[i * k + t];
            if a_it == T::zero() {
                continue;
            }
            let c_row = &mut c[t * n..(t + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj = *cj + a_it * bj;
            }
        }
    }
}

/// `c += a·bᵀ` for `a: m×n`, `b: k×n`, `c: m×k`.
pub fn matmul_nt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for t in 0..k {
            let b_row = &b[t * n..(t + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            c[i * k + t] = c[i * k + t] + acc;
        }
    }
}

/// Softmax over consecutive chunks of length `d`, with max subtraction.
pub fn softmax_rows<T: Real>(x: &[T], out: &mut [T], d: usize) {
    for (xr, yr) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = (v - max).exp();
            sum = sum + *y;
        }
        let inv = T::one() / sum;
        yr.iter_mut().for_each(|y| *y = *y * inv);
    }
}

/// Layer normalization over chunks of length `d`; also returns the per-row
/// mean and reciprocal standard deviation for the backward pass.
pub fn layer_norm_rows<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
    out: &mut [T],
) -> (Vec<T>, Vec<T>) {
    let d = gamma.len();
    let dn = T::of(d as f64);
    let rows = x.len() / d;
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for (xr, yr) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mean = xr.iter().fold(T::zero(), |s, &v| s + v) / dn;
        let var = xr
            .iter()
            .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
            / dn;
        let rstd = T::one() / (var + eps).sqrt();
        for ((y, &v), (&g, &b)) in yr.iter_mut().zip(xr).zip(gamma.iter().zip(beta)) {
            *y = (v - mean) * rstd * g + b;
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (means, rstds)
}

fn require_2d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        &[m, n] => Ok((m, n)),
        s => Err(Error::shape(format!("{what} must be 2-D, got {s:?}"))),
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d(a, "matmul lhs")?;
    let (k2, n) = require_2d(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dimensions differ: {:?} · {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut c = vec![0.0f32; m * n];
    matmul_into(a.data(), b.data(), &mut c, m, k, n);
    Tensor::new([m, n], c)
}

pub fn softmax_lastdim(t: &Tensor) -> Result<Tensor> {
    if t.is_empty() {
        return Err(Error::shape("softmax of an empty tensor"));
    }
    let mut out = vec![0.0f32; t.len()];
    softmax_rows(t.data(), &mut out, t.last_dim());
    Tensor::new(t.shape().to_vec(), out)
}

pub fn layer_norm(t: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let d = t.last_dim();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(format!(
            "layer_norm over last dim {d} with gamma {:?} and beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::config(format!(
            "layer_norm eps must be > 0, got {eps}"
        )));
    }
    let mut out = vec![0.0f32; t.len()];
    layer_norm_rows(t.data(), gamma.data(), beta.data(), eps, &mut out);
    Tensor::new(t.shape().to_vec(), out)
}

pub fn elementwise(kind: Activation, t: &Tensor) -> Tensor {
    t.map(|x| kind.apply(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    /// Triple-loop reference, independent of the blocked kernel.
    fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (m, k, n) = (a.len(), b.len(), b[0].len());
        (0..m)
            .map(|i| {
                (0..n)
                    .map(|j| (0..k).map(|t| a[i][t] * b[t][j]).sum())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let expected = naive_matmul(
            &[vec![1.0, 2.0], vec![3.0, 4.0]],
            &[vec![5.0, 6.0], vec![7.0, 8.0]],
        );
        assert_eq!(expected, vec![vec![19.0, 22.0], vec![43.0, 50.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = Tensor::from_fn([3, 3], |i| i as f32 * 0.7 - 2.0);
        assert_eq!(matmul(&a, &Tensor::identity(3)).unwrap(), a);
        let z = matmul(&a, &Tensor::zeros([3, 3])).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros([2, 3]), &Tensor::zeros([2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] · [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let u = softmax_lastdim(&Tensor::zeros([4])).unwrap();
        assert!(close(u.data(), &[0.25; 4], 1e-7));
        let s = softmax_lastdim(&Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        // e^x / Σe^x evaluated in f64
        let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
        let oracle: Vec<f32> = (1..=3).map(|i| ((i as f64).exp() / z) as f32).collect();
        assert!(close(s.data(), &oracle, 1e-6));
        assert!(close(s.data(), &[0.09003, 0.24473, 0.66524], 1e-5));
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::full([3], 1.0);
        let zeros = Tensor::zeros([3]);
        let c = layer_norm(&Tensor::full([3], 5.0), &ones, &zeros, 1e-5).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0, 0.0]);
        let t = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        let y = layer_norm(&t, &ones, &zeros, 1e-5).unwrap();
        // (x - 2) / sqrt(2/3 + 1e-5)
        let s = (2.0f64 / 3.0 + 1e-5).sqrt();
        assert!(close(
            y.data(),
            &[(-1.0 / s) as f32, 0.0, (1.0 / s) as f32],
            1e-6
        ));
        assert!(close(y.data(), &[-1.22474, 0.0, 1.22474], 1e-4));
    }

    #[test]
    fn layer_norm_rejects_mismatch() {
        let t = Tensor::zeros([2, 4]);
        assert!(layer_norm(&t, &Tensor::zeros([3]), &Tensor::zeros([4]), 1e-5).is_err());
        assert!(layer_norm(&t, &Tensor::zeros([4]), &Tensor::zeros([4]), 0.0).is_err());
    }

    /// erf via its Maclaurin series, accurate to ~1e-15 for |x| ≤ 3.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        for n in 1..200 {
            term *= -x * x / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    }

    #[test]
    fn activation_values() {
        assert_eq!(gelu(0.0f32), 0.0);
        assert_eq!(0.0f32.tanh(), 0.0);
        assert_eq!(sigmoid(0.0f32), 0.5);
        let sig1 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((sigmoid(1.0f32) as f64 - sig1).abs() < 1e-7);
        assert!((sigmoid(1.0f32) - 0.73106).abs() < 1e-5);
        let gelu1 = 0.5 * (1.0 + erf_series(1.0 / 2f64.sqrt()));
        assert!((gelu(1.0f32) as f64 - gelu1).abs() < 1e-6);
        assert!((gelu(1.0f32) - 0.84134).abs() < 1e-4);
        for x in [-3.0, -0.5, 0.3, 2.0] {
            let e = 0.5 * x * (1.0 + erf_series(x / 2f64.sqrt()));
            assert!((gelu(x) - e).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_extremes_are_finite() {
        assert_eq!(sigmoid(-1000.0f32), 0.0);
        assert_eq!(sigmoid(1000.0f32), 1.0);
        let s = softmax_lastdim(&Tensor::vector(vec![1e30, -1e30, 0.0]).unwrap()).unwrap();
        assert!(s.is_finite());
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(v in prop::collection::vec(-51200i32..51200, 1..32), c in -20480i32..20480) {
            // Dyadic grid so that x + c is exact in f32.
            let v: Vec<f32> = v.into_iter().map(|i| i as f32 / 1024.0).collect();
            let c = c as f32 / 1024.0;
            let t = Tensor::vector(v).unwrap();
            let s = softmax_lastdim(&t).unwrap();
            let sum: f32 = s.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-5);
            prop_assert!(s.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
            let shifted = softmax_lastdim(&t.map(|x| x + c)).unwrap();
            prop_assert!(close(s.data(), shifted.data(), 1e-6));
        }

        #[test]
        fn layer_norm_standardizes(v in prop::collection::vec(-100.0f32..100.0, 2..64)) {
            let d = v.len();
            let spread = v.iter().cloned().fold(f32::MIN, f32::max) - v.iter().cloned().fold(f32::MAX, f32::min);
            prop_assume!(spread > 1e-2);
            let y = layer_norm(&Tensor::vector(v).unwrap(), &Tensor::full([d], 1.0), &Tensor::zeros([d]), 1e-5).unwrap();
            let mean = y.data().iter().map(|&x| x as f64).sum::<f64>() / d as f64;
            let var = y.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }

        #[test]
        fn matmul_matches_naive(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
            let f = |i: usize| (((i as u64 * 2654435761 + seed) % 1000) as f32) / 250.0 - 2.0;
            let a = Tensor::from_fn([m, k], f);
            let b = Tensor::from_fn([k, n], |i| f(i + 7));
            let rows = |t: &Tensor, r: usize, c: usize| -> Vec<Vec<f64>> {
                (0..r).map(|i| (0..c).map(|j| t.at(i, j) as f64).collect()).collect()
            };
            let expect = naive_matmul(&rows(&a, m, k), &rows(&b, k, n));
            let got = matmul(&a, &b).unwrap();
            for (i, row) in expect.iter().enumerate() {
                for (j, &e) in row.iter().enumerate() {
                    prop_assert!((got.at(i, j) as f64 - e).abs() < 1e-4);
                }
            }
        }
    }
}
