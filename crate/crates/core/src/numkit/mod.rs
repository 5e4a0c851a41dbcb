//! Dense row-major linear algebra, activation functions, and initializers.

mod rng;

pub use rng::Rng;

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense column vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
#[serde(bound = "S: Scalar")]
pub struct Vector<S> {
    data: Vec<S>,
}

impl<S: Scalar> Vector<S> {
    pub fn from_vec(data: Vec<S>) -> Self {
        Vector { data }
    }

    pub fn zeros(dim: usize) -> Self {
        Vector { data: vec![S::zero(); dim] }
    }

    pub fn from_f64(values: &[f64]) -> Self {
        Vector { data: values.iter().map(|&v| S::of(v)).collect() }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, S> {
        self.data.iter()
    }

    pub fn dot(&self, other: &Self) -> S {
        debug_assert_eq!(self.dim(), other.dim());
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }

    /// Euclidean norm, rescaled by the largest magnitude so tiny vectors do
    /// not underflow to zero.
    pub fn l2_norm(&self) -> S {
        let m = self.max_abs();
        if m == S::zero() {
            return m;
        }
        m * self.data.iter().map(|&v| (v / m) * (v / m)).sum::<S>().sqrt()
    }

    pub fn scaled(&self, alpha: S) -> Self {
        Vector { data: self.data.iter().map(|&v| v * alpha).collect() }
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: S, x: &Self) {
        debug_assert_eq!(self.dim(), x.dim());
        for (s, &v) in self.data.iter_mut().zip(&x.data) {
            *s += alpha * v;
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        debug_assert_eq!(self.dim(), other.dim());
        Vector { data: self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect() }
    }

    pub fn add(&self, other: &Self) -> Self {
        debug_assert_eq!(self.dim(), other.dim());
        Vector { data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect() }
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<S> Index<usize> for Vector<S> {
    type Output = S;
    fn index(&self, i: usize) -> &S {
        &self.data[i]
    }
}

impl<S> IndexMut<usize> for Vector<S> {
    fn index_mut(&mut self, i: usize) -> &mut S {
        &mut self.data[i]
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
#[serde(try_from = "RawMatrix<S>")]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

#[derive(Deserialize)]
#[serde(bound = "S: Scalar")]
struct RawMatrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> TryFrom<RawMatrix<S>> for Matrix<S> {
    type Error = String;

    fn try_from(raw: RawMatrix<S>) -> std::result::Result<Self, String> {
        Matrix::from_vec(raw.rows, raw.cols, raw.data).map_err(|e| e.to_string())
    }
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = S::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Matrix::from_vec", rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds from nested rows given as `f64`; panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            assert_eq!(row.len(), cols, "ragged rows");
            data.extend(row.iter().map(|&v| S::of(v)));
        }
        Matrix { rows: rows.len(), cols, data }
    }

    /// Matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[&Vector<S>]) -> Self {
        let rows = columns.first().map_or(0, |c| c.dim());
        let mut m = Self::zeros(rows, columns.len());
        for (j, c) in columns.iter().enumerate() {
            for i in 0..rows {
                m[(i, j)] = c[i];
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vector<S> {
        Vector::from_vec((0..self.rows).map(|i| self[(i, j)]).collect())
    }

    /// `self · v`
    pub fn matvec(&self, v: &Vector<S>) -> Result<Vector<S>> {
        if v.dim() != self.cols {
            return Err(Error::shape("matvec", self.cols, v.dim()));
        }
        Ok(Vector::from_vec(
            (0..self.rows)
                .map(|i| self.row(i).iter().zip(v.iter()).map(|(&a, &b)| a * b).sum())
                .collect(),
        ))
    }

    /// `selfᵀ · v`, i.e. the row vector `vᵀ · self` as a column.
    pub fn matvec_t(&self, v: &Vector<S>) -> Result<Vector<S>> {
        if v.dim() != self.rows {
            return Err(Error::shape("matvec_t", self.rows, v.dim()));
        }
        let mut out = vec![S::zero(); self.cols];
        for i in 0..self.rows {
            let vi = v[i];
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += vi * a;
            }
        }
        Ok(Vector::from_vec(out))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{} rows", self.cols),
                format!("{} rows", other.rows),
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    /// `self += alpha · a bᵀ`
    pub fn add_outer(&mut self, alpha: S, a: &Vector<S>, b: &Vector<S>) {
        debug_assert_eq!((a.dim(), b.dim()), (self.rows, self.cols));
        for i in 0..self.rows {
            let ai = alpha * a[i];
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (r, &bj) in row.iter_mut().zip(b.iter()) {
                *r += ai * bj;
            }
        }
    }

    /// `self[:, j] += alpha · v`
    pub fn add_to_column(&mut self, j: usize, alpha: S, v: &Vector<S>) {
        debug_assert_eq!(v.dim(), self.rows);
        for i in 0..self.rows {
            self.data[i * self.cols + j] += alpha * v[i];
        }
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape("sub", format!("{:?}", self.shape()), format!("{:?}", other.shape())));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Determinant by partial-pivot LU. Square matrices only.
    pub fn determinant(&self) -> Result<S> {
        if self.rows != self.cols {
            return Err(Error::shape("determinant", "square", format!("{:?}", self.shape())));
        }
        let n = self.rows;
        let mut lu = self.clone();
        let mut det = S::one();
        for c in 0..n {
            let pivot = (c..n)
                .max_by(|&a, &b| lu[(a, c)].abs().partial_cmp(&lu[(b, c)].abs()).unwrap())
                .unwrap();
            if lu[(pivot, c)] == S::zero() {
                return Ok(S::zero());
            }
            if pivot != c {
                for j in 0..n {
                    lu.data.swap(pivot * n + j, c * n + j);
                }
                det = -det;
            }
            let p = lu[(c, c)];
            det *= p;
            for i in c + 1..n {
                let f = lu[(i, c)] / p;
                for j in c..n {
                    let v = lu[(c, j)];
                    lu[(i, j)] -= f * v;
                }
            }
        }
        Ok(det)
    }
}

impl<S> Index<(usize, usize)> for Matrix<S> {
    type Output = S;
    fn index(&self, (i, j): (usize, usize)) -> &S {
        &self.data[i * self.cols + j]
    }
}

impl<S> IndexMut<(usize, usize)> for Matrix<S> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut S {
        &mut self.data[i * self.cols + j]
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax<S: Scalar>(logits: &Vector<S>) -> Vector<S> {
    let max = logits.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<S> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    Vector::from_vec(exps.into_iter().map(|e| e / total).collect())
}

/// Logistic function, evaluated on the branch that cannot overflow.
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Entries i.i.d. uniform on `[-b, b]`, `b = sqrt(6 / cols)`; `cols` is the
/// fan-in of a weight used as `W · input`.
pub fn kaiming_uniform<S: Scalar>(rows: usize, cols: usize, rng: &mut Rng) -> Matrix<S> {
    let bound = (6.0 / cols as f64).sqrt();
    let data = (0..rows * cols).map(|_| S::of(rng.uniform(-bound, bound))).collect();
    Matrix { rows, cols, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop, prop_assert, proptest};

    fn v(xs: &[f64]) -> Vector<f64> {
        Vector::from_f64(xs)
    }

    #[test]
    fn matvec_examples() {
        let id = Matrix::<f64>::identity(3);
        assert_eq!(id.matvec(&v(&[1.0, 2.0, 3.0])).unwrap(), v(&[1.0, 2.0, 3.0]));
        let z = Matrix::<f64>::zeros(2, 3);
        assert_eq!(z.matvec(&v(&[1.0, 1.0, 1.0])).unwrap(), v(&[0.0, 0.0]));
        let m = Matrix::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(m.matvec(&v(&[1.0, 1.0])).unwrap(), v(&[3.0, 7.0]));
    }

    #[test]
    fn matvec_shape_error() {
        let m = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(m.matvec(&v(&[1.0, 1.0])), Err(Error::Shape { .. })));
        assert!(matches!(m.matvec_t(&v(&[1.0, 1.0, 1.0])), Err(Error::Shape { .. })));
    }

    #[test]
    fn matvec_t_matches_transpose() {
        let m = Matrix::<f64>::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let x = v(&[0.5, -1.0]);
        assert_eq!(m.matvec_t(&x).unwrap(), m.transpose().matvec(&x).unwrap());
    }

    #[test]
    fn matmul_and_determinant() {
        let a = Matrix::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Matrix::<f64>::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab, Matrix::from_rows(&[&[2.0, 1.0], &[4.0, 3.0]]));
        assert!((a.determinant().unwrap() + 2.0).abs() < 1e-14);
        assert!((b.determinant().unwrap() + 1.0).abs() < 1e-14);
        let m3 = Matrix::<f64>::from_rows(&[&[2.0, 0.0, 1.0], &[1.0, 3.0, 2.0], &[1.0, 1.0, 1.0]]);
        // cofactor expansion: 2(3-2) - 0 + 1(1-3) = 0
        assert!(m3.determinant().unwrap().abs() < 1e-14);
    }

    #[test]
    fn malformed_matrix_json_rejected() {
        let bad = r#"{"rows":2,"cols":2,"data":[1.0,2.0,3.0]}"#;
        assert!(serde_json::from_str::<Matrix<f64>>(bad).is_err());
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&v(&[0.0, 0.0, 0.0]));
        for &p in u.iter() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&v(&[1000.0, 0.0, 0.0]));
        assert!(s.is_finite());
        assert!((s[0] - 1.0).abs() < 1e-15);
        let e = std::f64::consts::E;
        let t = softmax(&v(&[1.0, 2.0]));
        assert!((t[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((t[1] - e / (1.0 + e)).abs() < 1e-15);
        assert!((t[0] - 0.26894).abs() < 1e-5 && (t[1] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(3.0f64.ln()) - 0.75).abs() < 1e-15);
        let tiny = sigmoid(-50.0f64);
        assert!(tiny > 0.0 && tiny < 1e-20);
        assert_eq!(sigmoid(0.0f32), 0.5);
    }

    #[test]
    fn kaiming_bound_and_determinism() {
        let m: Matrix<f64> = kaiming_uniform(1, 6, &mut Rng::new(5));
        assert!(m.as_slice().iter().all(|x| x.abs() <= 1.0));
        let m2: Matrix<f64> = kaiming_uniform(1, 6, &mut Rng::new(5));
        assert_eq!(m, m2);
    }

    #[test]
    fn kaiming_mean_within_three_standard_errors() {
        let n = 100_000;
        let m: Matrix<f64> = kaiming_uniform(1, n, &mut Rng::new(11));
        let b = (6.0 / n as f64).sqrt();
        // uniform on [-b, b] has variance b²/3
        let se = (b * b / 3.0 / n as f64).sqrt();
        let mean = m.as_slice().iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn l2_norm_zero_only_for_zero() {
        assert_eq!(Vector::<f64>::zeros(4).l2_norm(), 0.0);
        assert!(v(&[0.0, 1e-200, 0.0]).l2_norm() > 0.0);
        assert!(v(&[0.0, 1e-100, 0.0]).l2_norm() > 0.0);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(logits in prop::collection::vec(-700.0f64..700.0, 1..200)) {
            let p = softmax(&Vector::from_vec(logits));
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x >= 0.0 && x.is_finite()));
        }

        #[test]
        fn matvec_finite(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let m: Matrix<f64> = kaiming_uniform(rows, cols, &mut rng);
            let x = Vector::from_vec((0..cols).map(|_| rng.normal()).collect());
            prop_assert!(m.matvec(&x).unwrap().is_finite());
        }
    }
}
