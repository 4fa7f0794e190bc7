//! Dense f64 vectors and matrices plus the similarity / softmax primitives
//! shared by the encoders, the contrastive objective and retrieval.

use std::ops::Index;

use crate::error::{Error, Result};

/// Added to the norm product in cosine denominators.
pub const COSINE_EPS: f64 = 1e-12;

/// Non-empty vector of finite f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Vec64(Vec<f64>);

impl Vec64 {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("vector"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite vector element at index {i}"
            )));
        }
        Ok(Vec64(values))
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len > 0);
        Vec64(vec![0.0; len])
    }

    /// Caller guarantees non-empty, finite contents.
    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty());
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Vec64(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl Index<usize> for Vec64 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl AsRef<[f64]> for Vec64 {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Row-major dense matrix of finite f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat64 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyInput("matrix"));
        }
        if data.len() != rows * cols {
            return Err(Error::dim(rows * cols, data.len(), "matrix element count"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite matrix element".into()));
        }
        Ok(Mat64 { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0);
        Mat64 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptyInput("matrix rows"))?;
        let cols = first.len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim(cols, r.len(), "matrix row length"));
            }
            data.extend_from_slice(r);
        }
        Mat64::new(rows.len(), cols, data)
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Mat64 { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.cols)
    }

    pub fn transpose(&self) -> Mat64 {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Mat64::from_vec_unchecked(self.cols, self.rows, out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity on raw slices; `a·b / (‖a‖‖b‖ + ε)`.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b) + COSINE_EPS)
}

pub fn cosine_similarity(a: &Vec64, b: &Vec64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(a.len(), b.len(), "cosine_similarity"));
    }
    Ok(cosine(a.as_slice(), b.as_slice()))
}

/// Elementwise arithmetic mean of equal-length vectors.
pub fn mean_vectors<V: AsRef<[f64]>>(vs: &[V]) -> Result<Vec64> {
    let first = vs.first().ok_or(Error::EmptyInput("mean_vectors"))?.as_ref();
    let mut acc = first.to_vec();
    for v in &vs[1..] {
        let v = v.as_ref();
        if v.len() != acc.len() {
            return Err(Error::dim(acc.len(), v.len(), "mean_vectors"));
        }
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    // n copies of x must come back as x exactly.
    if vs[1..].iter().all(|v| v.as_ref() == first) {
        return Vec64::new(first.to_vec());
    }
    let n = vs.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Vec64::new(acc)
}

/// Row-wise `exp(scale·m) / Σ exp(scale·m)`, with row-max subtraction.
pub fn softmax_rows(m: &Mat64, scale: f64) -> Result<Mat64> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidInput(format!("softmax scale {scale}")));
    }
    if !m.is_finite() {
        return Err(Error::InvalidInput("non-finite softmax input".into()));
    }
    let mut out = m.clone();
    for i in 0..m.rows() {
        softmax_in_place(out.row_mut(i), scale);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64], scale: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (scale * (*x - max)).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

pub fn log_sum_exp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptyInput("log_sum_exp"));
    }
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite log_sum_exp input".into()));
    }
    Ok(lse(xs))
}

pub(crate) fn lse(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> Vec64 {
        Vec64::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine_similarity(&v(&[1.0, 2.0, 2.0]), &v(&[2.0, 4.0, 4.0])).unwrap();
        assert!((c - 1.0).abs() < 1e-12);
        let c = cosine_similarity(&v(&[1.0, 0.0]), &v(&[-1.0, 0.0])).unwrap();
        assert!((c + 1.0).abs() < 1e-11);
    }

    #[test]
    fn cosine_zero_vectors_and_mismatch() {
        assert_eq!(cosine_similarity(&v(&[0.0, 0.0]), &v(&[0.0, 0.0])).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&v(&[1.0]), &v(&[1.0, 2.0])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn vec64_rejects_nan_and_empty() {
        assert!(Vec64::new(vec![]).is_err());
        assert!(Vec64::new(vec![1.0, f64::NAN]).is_err());
        assert!(Mat64::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn mean_examples() {
        assert_eq!(mean_vectors(&[v(&[1.0, 3.0]), v(&[3.0, 1.0])]).unwrap(), v(&[2.0, 2.0]));
        assert_eq!(mean_vectors(&[v(&[0.3, -7.1])]).unwrap(), v(&[0.3, -7.1]));
        assert_eq!(
            mean_vectors(&[v(&[2.0, 0.0]), v(&[0.0, 2.0]), v(&[1.0, 1.0])]).unwrap(),
            v(&[1.0, 1.0])
        );
        assert!(matches!(
            mean_vectors::<Vec64>(&[]),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            mean_vectors(&[v(&[1.0]), v(&[1.0, 2.0])]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let m = Mat64::from_rows(&[vec![0.0, 0.0], vec![1000.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let s = softmax_rows(&m, 1.0).unwrap();
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert!((s.get(1, 0) - 1.0).abs() < 1e-9 && s.get(1, 1) < 1e-9);
        // e / (e + 1) evaluated directly
        let e = std::f64::consts::E;
        assert!((s.get(2, 0) - e / (e + 1.0)).abs() < 1e-12);
        assert!((s.get(2, 0) - 0.7310586).abs() < 1e-6);
        assert!((s.get(2, 1) - 0.2689414).abs() < 1e-6);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        let m = Mat64::zeros(1, 2);
        assert!(softmax_rows(&m, 0.0).is_err());
        let mut bad = Mat64::zeros(1, 2);
        bad.as_mut_slice()[0] = f64::INFINITY;
        assert!(softmax_rows(&bad, 1.0).is_err());
    }

    #[test]
    fn lse_examples() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((log_sum_exp(&[0.75]).unwrap() - 0.75).abs() < 1e-15);
        assert!((log_sum_exp(&[1000.0, 1000.0]).unwrap() - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!(log_sum_exp(&[]).is_err());
    }

    fn nonzero_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, len)
            .prop_filter("nonzero", |v| norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn self_cosine_is_one(a in nonzero_vec(7)) {
            prop_assert!((cosine(&a, &a) - 1.0).abs() < 1e-9);
        }

        #[test]
        fn cosine_scale_invariant(a in nonzero_vec(5), b in nonzero_vec(5), c in 1e-3f64..1e3) {
            let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
            prop_assert!((cosine(&scaled, &b) - cosine(&a, &b)).abs() < 1e-9);
            prop_assert!(cosine(&a, &b).abs() <= 1.0 + 1e-9);
        }

        #[test]
        fn softmax_rows_sum_to_one(row in prop::collection::vec(-1e6f64..1e6, 1..20)) {
            let n = row.len();
            let m = Mat64::new(1, n, row).unwrap();
            let s = softmax_rows(&m, 1.0).unwrap();
            let sum: f64 = s.row(0).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(s.row(0).iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn mean_of_copies_is_exact(x in prop::collection::vec(-1e3f64..1e3, 1..10), n in 1usize..9) {
            let copies = vec![Vec64::new(x.clone()).unwrap(); n];
            let m = mean_vectors(&copies).unwrap();
            prop_assert_eq!(m.as_slice(), &x[..]);
        }
    }
}
