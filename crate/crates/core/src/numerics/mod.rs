//! Small dense linear algebra and activation kernels.
//!
//! Everything is `f64`. Vectors and matrices are plain owned buffers; matrices
//! are row-major. Nothing here tries to be fast beyond avoiding needless
//! allocation in the inner loops.

mod rng;

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use rng::{gaussian_sample, uniform_sample, Rng};

/// Owned real vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vec64(Vec<f64>);

impl Vec64 {
    pub fn new(values: Vec<f64>) -> Self {
        Vec64(values)
    }

    pub fn zeros(n: usize) -> Self {
        Vec64(vec![0.0; n])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(self, other)
    }

    pub fn norm(&self) -> f64 {
        norm(self)
    }

    /// Unit-length copy. A zero vector has no direction and is a domain error.
    pub fn normalized(&self) -> Result<Vec64> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::domain(format!(
                "cannot normalize vector with norm {n}"
            )));
        }
        Ok(Vec64(self.0.iter().map(|x| x / n).collect()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl Deref for Vec64 {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vec64 {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl AsRef<[f64]> for Vec64 {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for Vec64 {
    fn from(values: Vec<f64>) -> Self {
        Vec64(values)
    }
}

impl FromIterator<f64> for Vec64 {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Vec64(iter.into_iter().collect())
    }
}

/// Row-major real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Mat64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat64 {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat64::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major values, checking `values.len() == rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(Mat64 { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::shape(format!(
                "row {bad} has length {}, expected {cols}",
                rows[bad].len()
            )));
        }
        Ok(Mat64 {
            rows: rows.len(),
            cols,
            values: rows.concat(),
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_shape(&self, other: &Mat64) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }

    /// `self += alpha * u vᵀ`.
    pub(crate) fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (i, &ui) in u.iter().enumerate() {
            let a = alpha * ui;
            if a == 0.0 {
                continue;
            }
            let row = &mut self.values[i * self.cols..(i + 1) * self.cols];
            for (w, &vj) in row.iter_mut().zip(v) {
                *w += a * vj;
            }
        }
    }

    /// `selfᵀ · v`.
    pub(crate) fn transpose_matvec(&self, v: &[f64]) -> Result<Vec64> {
        if v.len() != self.rows {
            return Err(Error::shape(format!(
                "transpose of {}x{} matrix applied to vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(i)) {
                *o += w * vi;
            }
        }
        Ok(Vec64(out))
    }
}

/// Matrix-vector product `m · v`.
pub fn matvec(m: &Mat64, v: &[f64]) -> Result<Vec64> {
    if v.len() != m.cols {
        return Err(Error::shape(format!(
            "{}x{} matrix applied to vector of length {}",
            m.rows,
            m.cols,
            v.len()
        )));
    }
    Ok((0..m.rows).map(|i| dot(m.row(i), v)).collect())
}

pub fn relu(v: &[f64]) -> Vec64 {
    v.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect()
}

/// Temperature-scaled softmax, `softmax(logits / tau)`, computed with max-subtraction.
pub fn softmax_temp(logits: &[f64], tau: f64) -> Result<Vec64> {
    if logits.is_empty() {
        return Err(Error::shape("softmax of an empty vector"));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::domain(format!("temperature must be > 0, got {tau}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| ((l - max) / tau).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    Ok(Vec64(out))
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::domain("cosine similarity with a zero vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solves `a · x = b` for square `a` by Gauss-Jordan elimination with partial pivoting.
pub(crate) fn solve(a: &Mat64, b: &Mat64) -> Result<Mat64> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return Err(Error::shape(format!(
            "solve needs square system, got {}x{} and rhs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let m = b.cols();
    let mut lhs = a.clone();
    let mut rhs = b.clone();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| lhs.get(i, col).abs().total_cmp(&lhs.get(j, col).abs()))
            .unwrap_or(col);
        if lhs.get(pivot, col).abs() < 1e-12 {
            return Err(Error::domain("singular system"));
        }
        if pivot != col {
            for j in 0..n {
                let t = lhs.get(col, j);
                lhs.set(col, j, lhs.get(pivot, j));
                lhs.set(pivot, j, t);
            }
            for j in 0..m {
                let t = rhs.get(col, j);
                rhs.set(col, j, rhs.get(pivot, j));
                rhs.set(pivot, j, t);
            }
        }
        let p = lhs.get(col, col);
        for j in 0..n {
            lhs.set(col, j, lhs.get(col, j) / p);
        }
        for j in 0..m {
            rhs.set(col, j, rhs.get(col, j) / p);
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = lhs.get(i, col);
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                lhs.set(i, j, lhs.get(i, j) - f * lhs.get(col, j));
            }
            for j in 0..m {
                rhs.set(i, j, rhs.get(i, j) - f * rhs.get(col, j));
            }
        }
    }
    Ok(rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use super::Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matvec_examples() {
        assert_eq!(
            matvec(&Mat64::identity(3), &[1.0, 2.0, 3.0]).unwrap().as_ref(),
            &[1.0, 2.0, 3.0]
        );
        let one = Mat64::from_vec(1, 1, vec![2.0]).unwrap();
        assert_eq!(matvec(&one, &[1.0]).unwrap().as_ref(), &[2.0]);
        let m = Mat64::from_rows(&[vec![1.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert_eq!(matvec(&m, &[3.0, 4.0]).unwrap().as_ref(), &[7.0, 8.0]);
    }

    #[test]
    fn matvec_shape_error_names_dims() {
        let m = Mat64::zeros(2, 3);
        let err = matvec(&m, &[1.0, 2.0]).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("length 2"), "{err}");
    }

    #[test]
    fn transpose_matvec_matches_explicit_transpose() {
        let m = Mat64::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let t = Mat64::from_rows(&[vec![1.0, 4.0], vec![2.0, 5.0], vec![3.0, 6.0]]).unwrap();
        let v = [0.5, -1.0];
        assert_eq!(m.transpose_matvec(&v).unwrap(), matvec(&t, &v).unwrap());
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&[0.0, 0.0]).as_ref(), &[0.0, 0.0]);
        assert_eq!(relu(&[-1.0, 2.0]).as_ref(), &[0.0, 2.0]);
        assert_eq!(relu(&[5.0]).as_ref(), &[5.0]);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_temp(&[0.0, 0.0], 1.0).unwrap().as_ref(), &[0.5, 0.5]);
        let e2 = 2f64.exp();
        let p = softmax_temp(&[2.0, 0.0], 1.0).unwrap();
        assert!(close(&p, &[e2 / (e2 + 1.0), 1.0 / (e2 + 1.0)], 1e-15));
        assert!(close(&p, &[0.8808, 0.1192], 1e-4));
        let scaled = softmax_temp(&[1.0, 0.0], 0.5).unwrap();
        assert!(close(&scaled, &p, 1e-15));
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(softmax_temp(&[], 1.0), Err(Error::Shape(_))));
        assert!(matches!(softmax_temp(&[1.0], 0.0), Err(Error::Domain(_))));
        assert!(matches!(softmax_temp(&[1.0], -2.0), Err(Error::Domain(_))));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[0.6, 0.8], &[0.6, 0.8]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_sim(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &[1.0, 1.0]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(cosine_sim(&[1.0], &[1.0, 1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn solve_recovers_known_solution() {
        let a = Mat64::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let x = Mat64::from_rows(&[vec![1.0], vec![-2.0]]).unwrap();
        let b = Mat64::from_vec(2, 1, matvec(&a, &[1.0, -2.0]).unwrap().into_inner()).unwrap();
        let got = solve(&a, &b).unwrap();
        assert!(close(got.values(), x.values(), 1e-12));
        assert!(solve(&Mat64::zeros(2, 2), &b).is_err());
    }

    fn finite_vec(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, 1..max_len)
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_keeps_argmax(v in finite_vec(12), tau in 0.01f64..10.0) {
            let p = softmax_temp(&v, tau).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert_eq!(argmax(&p), argmax(&v));
        }

        #[test]
        fn relu_is_idempotent(v in finite_vec(16)) {
            let once = relu(&v);
            prop_assert_eq!(relu(&once), once);
        }

        #[test]
        fn cosine_self_and_scale(a in finite_vec(10), lambda in 0.01f64..100.0, seed in any::<u64>()) {
            prop_assume!(norm(&a) > 1e-3);
            prop_assert!((cosine_sim(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
            let mut rng = Rng::new(seed);
            let b = gaussian_sample(&mut rng, 0.0, 1.0, a.len()).unwrap();
            let scaled: Vec<f64> = a.iter().map(|x| lambda * x).collect();
            let c1 = cosine_sim(&a, &b).unwrap();
            let c2 = cosine_sim(&scaled, &b).unwrap();
            prop_assert!((c1 - c2).abs() <= 1e-12);
        }
    }
}
