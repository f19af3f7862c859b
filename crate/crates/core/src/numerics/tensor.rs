//! Dense row-major `f64` tensors and the raw kernels behind every tape op.
//!
//! Summation order is part of the contract: all contractions accumulate
//! sequentially over the last axis (ascending index), and row-wise
//! reductions scan ascending. Parallel dispatch only ever splits work
//! across output rows, so results are bit-identical with and without the
//! `parallel` feature.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::invalid("tensor", format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map(|r| r.len()).unwrap_or(0);
        if m == 0 || n == 0 {
            return Err(Error::invalid("tensor", "from_rows needs a nonempty matrix"));
        }
        let mut data = Vec::with_capacity(m * n);
        for row in &rows {
            if row.len() != n {
                return Err(Error::invalid("tensor", "ragged rows"));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![m, n], data)
    }

    /// Seeded standard-normal fill scaled by `std`.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Rows of a matrix; a 1-D tensor counts as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    /// Length of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("nonempty shape")
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let n = self.cols();
        &self.data[r * n..(r + 1) * n]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

// ─── Raw kernels ──────────────────────────────────────────────────────────────

/// `out = a (m×k) · b (k×n)`, accumulating sequentially over `k`.
pub fn matmul_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    par::for_each_row(out, n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, slot) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (p, &av) in ar.iter().enumerate() {
                acc += av * b[p * n + j];
            }
            *slot = acc;
        }
    });
}

/// Sequential twin of [`matmul_into`] for the scheduler-comparison bench.
pub fn matmul_into_seq(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    par::for_each_row_seq(out, n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, slot) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (p, &av) in ar.iter().enumerate() {
                acc += av * b[p * n + j];
            }
            *slot = acc;
        }
    });
}

/// `out = a (m×k) · b^T (n×k)` — contraction over the shared `k` axis.
pub fn matmul_tb_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    par::for_each_row(out, n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, slot) in row.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += ar[p] * br[p];
            }
            *slot = acc;
        }
    });
}

/// `out = a^T (k×m) · b (k×n)` — used by matmul backward.
pub fn matmul_ta_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    par::for_each_row(out, n, |i, row| {
        for (j, slot) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[p * m + i] * b[p * n + j];
            }
            *slot = acc;
        }
    });
}

/// Row-wise softmax, stabilized by max subtraction; scans ascending.
pub fn softmax_row(out: &mut [f64], row: &[f64]) {
    debug_assert_eq!(out.len(), row.len());
    let mut max = f64::NEG_INFINITY;
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for (slot, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *slot = e;
        sum += e;
    }
    for slot in out.iter_mut() {
        *slot /= sum;
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Normalize one row to zero mean / unit variance (population variance,
/// epsilon 1e-6) and apply the affine gain/bias.
pub fn layer_norm_row(out: &mut [f64], row: &[f64], gain: &[f64], bias: &[f64]) {
    let n = row.len() as f64;
    let mut mean = 0.0;
    for &v in row {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for &v in row {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for (j, slot) in out.iter_mut().enumerate() {
        *slot = (row[j] - mean) * inv * gain[j] + bias[j];
    }
}

/// Tanh-approximation GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shape_data_length_must_agree() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn matmul_variants_match_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (m, k, n) = (4, 5, 3);
        let a = Tensor::randn(vec![m, k], 1.0, &mut rng);
        let b = Tensor::randn(vec![k, n], 1.0, &mut rng);

        // independent triple-loop oracle
        let mut want = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                want[i * n + j] = s;
            }
        }

        let mut got = vec![0.0; m * n];
        matmul_into(&mut got, a.data(), b.data(), m, k, n);
        assert_eq!(got, want);

        // b^T route: transpose b and multiply
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b.data()[p * n + j];
            }
        }
        let mut got_tb = vec![0.0; m * n];
        matmul_tb_into(&mut got_tb, a.data(), &bt, m, k, n);
        for (x, y) in got_tb.iter().zip(&want) {
            assert!((x - y).abs() <= 1e-15);
        }
    }

    #[test]
    fn matmul_parallel_and_sequential_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (m, k, n) = (9, 17, 13);
        let a = Tensor::randn(vec![m, k], 1.0, &mut rng);
        let b = Tensor::randn(vec![k, n], 1.0, &mut rng);
        let mut x = vec![0.0; m * n];
        let mut y = vec![0.0; m * n];
        matmul_into(&mut x, a.data(), b.data(), m, k, n);
        matmul_into_seq(&mut y, a.data(), b.data(), m, k, n);
        assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn softmax_row_is_stable_and_normalized() {
        let mut out = vec![0.0; 3];
        softmax_row(&mut out, &[0.0, 0.0, 0.0]);
        for v in &out {
            assert!((v - 1.0 / 3.0).abs() <= 1e-15);
        }

        softmax_row(&mut out[..2], &[1000.0, 1000.0]);
        assert!((out[0] - 0.5).abs() <= 1e-15 && out[0].is_finite());

        softmax_row(&mut out[..2], &[0.0, 3.0_f64.ln()]);
        assert!((out[0] - 0.25).abs() <= 1e-12);
        assert!((out[1] - 0.75).abs() <= 1e-12);
    }

    #[test]
    fn layer_norm_row_statistics() {
        let gain = vec![1.0; 6];
        let bias = vec![0.0; 6];

        // constant row: epsilon keeps it finite and exactly zero
        let mut out = vec![0.0; 6];
        layer_norm_row(&mut out, &[3.5; 6], &gain, &bias);
        assert!(out.iter().all(|v| *v == 0.0));

        // already-normalized row
        let mut out2 = vec![0.0; 2];
        layer_norm_row(&mut out2, &[1.0, -1.0], &gain[..2], &bias[..2]);
        assert!((out2[0] - 1.0).abs() <= 1e-6);
        assert!((out2[1] + 1.0).abs() <= 1e-6);

        // random row: recompute statistics directly
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(vec![6], 2.0, &mut rng);
        let mut out3 = vec![0.0; 6];
        layer_norm_row(&mut out3, x.data(), &gain, &bias);
        let mean: f64 = out3.iter().sum::<f64>() / 6.0;
        let var: f64 = out3.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
        assert!(mean.abs() <= 1e-12);
        assert!((var - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-2.0, -0.5, 0.0, 0.3, 1.7] {
            let eps = 1e-6;
            let numeric = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!((gelu_grad(x) - numeric).abs() <= 1e-8);
        }
    }
}
