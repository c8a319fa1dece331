//! Dense double-precision matrix substrate shared by every model module.
//!
//! Everything is row-major `f64`. Accumulation order is fixed (each output
//! element sums its products with the inner index ascending) so results are
//! bit-reproducible across runs and platforms. Matrices are immutable-by-value
//! in the public operations: every operation returns a fresh matrix and all of
//! them preserve the all-finite invariant for all-finite inputs.

use crate::error::{IcvlError, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A `rows x dims` real matrix in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    rows: usize,
    dims: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn zeros(rows: usize, dims: usize) -> Self {
        EmbeddingMatrix {
            rows,
            dims,
            data: vec![0.0; rows * dims],
        }
    }

    pub fn filled(rows: usize, dims: usize, value: f64) -> Self {
        EmbeddingMatrix {
            rows,
            dims,
            data: vec![value; rows * dims],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from row-major data; rejects length mismatches and non-finite values.
    pub fn from_vec(rows: usize, dims: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dims {
            return Err(IcvlError::data(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                dims
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(IcvlError::numeric(format!(
                "non-finite value {v} in {rows}x{dims} matrix"
            )));
        }
        Ok(EmbeddingMatrix { rows, dims, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dims = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dims) {
            return Err(IcvlError::data("ragged rows in matrix literal"));
        }
        Self::from_vec(rows.len(), dims, rows.concat())
    }

    /// Seeded standard-normal entries scaled by `scale` (Box-Muller over ChaCha).
    pub fn seeded_gaussian(rows: usize, dims: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * dims)
            .map(|_| standard_normal(&mut rng) * scale)
            .collect();
        EmbeddingMatrix { rows, dims, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.dims)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.dims + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.dims + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dims..(r + 1) * self.dims]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.dims..(r + 1) * self.dims]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.dims, self.rows);
        for r in 0..self.rows {
            for c in 0..self.dims {
                out.data[c * self.rows + r] = self.data[r * self.dims + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        EmbeddingMatrix {
            rows: self.rows,
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(IcvlError::shape("add", self.shape(), other.shape()));
        }
        Ok(EmbeddingMatrix {
            rows: self.rows,
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(IcvlError::shape("sub", self.shape(), other.shape()));
        }
        Ok(EmbeddingMatrix {
            rows: self.rows,
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    /// Stack `self` on top of `other` (column counts must agree).
    pub fn concat_rows(&self, other: &Self) -> Result<Self> {
        if self.dims != other.dims && self.rows != 0 && other.rows != 0 {
            return Err(IcvlError::shape("concat_rows", self.shape(), other.shape()));
        }
        let dims = if self.rows == 0 { other.dims } else { self.dims };
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(EmbeddingMatrix {
            rows: self.rows + other.rows,
            dims,
            data,
        })
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.rows {
            return Err(IcvlError::data(format!(
                "row slice {start}..{} out of range for {} rows",
                start + len,
                self.rows
            )));
        }
        Ok(EmbeddingMatrix {
            rows: len,
            dims: self.dims,
            data: self.data[start * self.dims..(start + len) * self.dims].to_vec(),
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 kept away from zero so ln stays finite.
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Matrix product with the documented accumulation order: for every output
/// element the sum over the inner index runs ascending, so the result is
/// bit-identical to the scalar triple loop.
pub fn matmul(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if a.dims != b.rows {
        return Err(IcvlError::shape("matmul", a.shape(), b.shape()));
    }
    let (n, k, m) = (a.rows, a.dims, b.dims);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b.data[kk * m..(kk + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(EmbeddingMatrix {
        rows: n,
        dims: m,
        data: out,
    })
}

/// `a * b^T`; same accumulation order as [`matmul`] applied to the transpose.
pub fn matmul_nt(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if a.dims != b.dims {
        return Err(IcvlError::shape("matmul_nt", a.shape(), b.shape()));
    }
    matmul(a, &b.transpose())
}

/// Row-wise softmax with per-row max subtraction for stability.
pub fn softmax_rows(m: &EmbeddingMatrix) -> EmbeddingMatrix {
    let mut out = m.clone();
    for r in 0..m.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `m * weight + bias` with the bias broadcast across rows.
pub fn linear(m: &EmbeddingMatrix, weight: &EmbeddingMatrix, bias: &[f64]) -> Result<EmbeddingMatrix> {
    if m.dims != weight.rows {
        return Err(IcvlError::shape("linear", m.shape(), weight.shape()));
    }
    if bias.len() != weight.dims {
        return Err(IcvlError::shape(
            "linear bias",
            (1, bias.len()),
            weight.shape(),
        ));
    }
    let mut out = matmul(m, weight)?;
    for r in 0..out.rows {
        for (o, b) in out.row_mut(r).iter_mut().zip(bias) {
            *o += b;
        }
    }
    Ok(out)
}

/// Fixed 2D sinusoidal positional encoding over a (segment, frame) grid.
///
/// The first `dims/2` channels encode the segment index, the last `dims/2`
/// the within-segment frame index, each with interleaved sin/cos pairs at
/// wavelengths `10000^(2i/(dims/2))`. Row order is segment-major.
pub fn positional_encoding_2d(
    n_segments: usize,
    frames_per_segment: usize,
    dims: usize,
) -> Result<EmbeddingMatrix> {
    if dims == 0 || dims % 4 != 0 {
        return Err(IcvlError::config(format!(
            "positional encoding dims must be a positive multiple of 4, got {dims}"
        )));
    }
    let half = dims / 2;
    let pairs = half / 2;
    let mut out = EmbeddingMatrix::zeros(n_segments * frames_per_segment, dims);
    for seg in 0..n_segments {
        for frame in 0..frames_per_segment {
            let r = seg * frames_per_segment + frame;
            let row = out.row_mut(r);
            for i in 0..pairs {
                let rate = 10000f64.powf(2.0 * i as f64 / half as f64);
                let a_seg = seg as f64 / rate;
                let a_frm = frame as f64 / rate;
                row[2 * i] = a_seg.sin();
                row[2 * i + 1] = a_seg.cos();
                row[half + 2 * i] = a_frm.sin();
                row[half + 2 * i + 1] = a_frm.cos();
            }
        }
    }
    Ok(out)
}

/// Mean over rows of `-log softmax(row)[target]`.
pub fn cross_entropy(logits: &EmbeddingMatrix, targets: &[usize]) -> Result<f64> {
    if targets.len() != logits.rows {
        return Err(IcvlError::data(format!(
            "{} targets for {} logit rows",
            targets.len(),
            logits.rows
        )));
    }
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= logits.dims {
            return Err(IcvlError::data(format!(
                "target index {t} out of range for {} classes",
                logits.dims
            )));
        }
        total += row_nll(logits.row(r), t);
    }
    Ok(total / logits.rows as f64)
}

/// `-log softmax(row)[target]` via a numerically stable log-sum-exp.
pub(crate) fn row_nll(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - row[target]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let a = m(&[&[1.0, -2.0, 3.5], &[0.25, 7.0, -1.0]]);
        let out = matmul(&EmbeddingMatrix::identity(2), &a).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_hand_case() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[5.0], &[6.0]]);
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let a = EmbeddingMatrix::seeded_gaussian(7, 5, 1.0, 11);
        let b = EmbeddingMatrix::seeded_gaussian(5, 3, 1.0, 12);
        let fast = matmul(&a, &b).unwrap();
        // Scalar triple-loop oracle, independent of the production loop order.
        for i in 0..7 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..5 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                assert!((fast.get(i, j) - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = EmbeddingMatrix::zeros(2, 3);
        let b = EmbeddingMatrix::zeros(4, 2);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("4x2"), "{err}");
    }

    #[test]
    fn matmul_associativity_against_oracle() {
        for seed in 0..5 {
            let a = EmbeddingMatrix::seeded_gaussian(6, 6, 1.0, 100 + seed);
            let b = EmbeddingMatrix::seeded_gaussian(6, 6, 1.0, 200 + seed);
            let c = EmbeddingMatrix::seeded_gaussian(6, 6, 1.0, 300 + seed);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (l, r) in left.data().iter().zip(right.data()) {
                let scale = l.abs().max(r.abs()).max(1.0);
                assert!((l - r).abs() / scale <= 1e-9);
            }
        }
    }

    #[test]
    fn softmax_uniform_row() {
        let out = softmax_rows(&m(&[&[0.0, 0.0, 0.0]]));
        for v in out.data() {
            assert!((v - 1.0 / 3.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let base = m(&[&[0.3, -1.2, 2.0, 0.0]]);
        let shifted = base.map(|v| v + 17.5);
        let a = softmax_rows(&base);
        let b = softmax_rows(&shifted);
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn softmax_extreme_values_no_overflow() {
        let out = softmax_rows(&m(&[&[1000.0, 0.0]]));
        assert!(out.is_finite());
        assert!(out.get(0, 0) > 1.0 - 1e-12);
        assert!(out.get(0, 1) < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_fuzz() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10_000 {
            let dims = 1 + (rng.random::<u64>() % 8) as usize;
            let row: Vec<f64> = (0..dims).map(|_| (rng.random::<f64>() - 0.5) * 200.0).collect();
            let m = EmbeddingMatrix::from_vec(1, dims, row).unwrap();
            let s: f64 = softmax_rows(&m).data().iter().sum();
            assert!((s - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let x = EmbeddingMatrix::seeded_gaussian(3, 4, 1.0, 5);
        let id = EmbeddingMatrix::identity(4);
        let out = linear(&x, &id, &[0.0; 4]).unwrap();
        assert_eq!(out, x);

        let zero_w = EmbeddingMatrix::zeros(4, 2);
        let out = linear(&x, &zero_w, &[1.5, -2.5]).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), &[1.5, -2.5]);
        }
    }

    #[test]
    fn linear_matches_matmul_plus_add_oracle() {
        let x = EmbeddingMatrix::seeded_gaussian(4, 5, 1.0, 21);
        let w = EmbeddingMatrix::seeded_gaussian(5, 3, 1.0, 22);
        let bias = [0.1, -0.7, 2.0];
        let out = linear(&x, &w, &bias).unwrap();
        let oracle = matmul(&x, &w).unwrap();
        for r in 0..4 {
            for c in 0..3 {
                assert!((out.get(r, c) - (oracle.get(r, c) + bias[c])).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn positional_encoding_origin_row() {
        let pe = positional_encoding_2d(2, 3, 8).unwrap();
        let row = pe.row(0);
        // sin channels are even offsets within each half, cos channels odd.
        for i in 0..2 {
            assert_eq!(row[2 * i], 0.0);
            assert_eq!(row[2 * i + 1], 1.0);
            assert_eq!(row[4 + 2 * i], 0.0);
            assert_eq!(row[4 + 2 * i + 1], 1.0);
        }
    }

    #[test]
    fn positional_encoding_bounded_and_deterministic() {
        let pe = positional_encoding_2d(5, 4, 16).unwrap();
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(pe, positional_encoding_2d(5, 4, 16).unwrap());
    }

    #[test]
    fn positional_encoding_rows_pairwise_distinct() {
        let pe = positional_encoding_2d(16, 16, 8).unwrap();
        for a in 0..pe.rows() {
            for b in (a + 1)..pe.rows() {
                assert_ne!(pe.row(a), pe.row(b), "rows {a} and {b} collide");
            }
        }
    }

    #[test]
    fn positional_encoding_rejects_bad_dims() {
        assert!(matches!(
            positional_encoding_2d(2, 2, 6),
            Err(IcvlError::Config(_))
        ));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let logits = EmbeddingMatrix::zeros(3, 7);
        let ce = cross_entropy(&logits, &[0, 3, 6]).unwrap();
        assert!((ce - (7f64).ln()).abs() <= 1e-12);
    }

    #[test]
    fn cross_entropy_confident_is_near_zero() {
        let mut logits = EmbeddingMatrix::zeros(2, 4);
        logits.set(0, 1, 30.0);
        logits.set(1, 2, 30.0);
        let ce = cross_entropy(&logits, &[1, 2]).unwrap();
        assert!(ce < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_direct_formula_oracle() {
        let logits = EmbeddingMatrix::seeded_gaussian(5, 4, 2.0, 33);
        let targets = [1, 0, 3, 2, 2];
        let got = cross_entropy(&logits, &targets).unwrap();
        let mut oracle = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = logits.row(r);
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            oracle += -(row[t].exp() / denom).ln();
        }
        oracle /= 5.0;
        assert!((got - oracle).abs() <= 1e-12);
    }

    #[test]
    fn cross_entropy_shift_invariance() {
        let logits = EmbeddingMatrix::seeded_gaussian(3, 5, 1.0, 44);
        let shifted = logits.map(|v| v + 123.0);
        let targets = [4, 1, 0];
        let a = cross_entropy(&logits, &targets).unwrap();
        let b = cross_entropy(&shifted, &targets).unwrap();
        assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let logits = EmbeddingMatrix::zeros(1, 3);
        assert!(matches!(
            cross_entropy(&logits, &[3]),
            Err(IcvlError::Data(_))
        ));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(EmbeddingMatrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(EmbeddingMatrix::from_vec(1, 2, vec![1.0]).is_err());
    }
}
