//! Dense row-major matrices, the seeded generator, and the finite-difference
//! gradient oracle that every hand-written backward pass is checked against.
//!
//! All arithmetic is `f64`.

use std::ops::{Index, IndexMut};

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denominator floor for gradient checks: blocks whose entries all fall
/// below this are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Rows with a norm below this are treated as degenerate.
pub const NORM_FLOOR: f64 = 1e-12;

/// Dense 2-D matrix stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Mat::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. An empty slice gives a 0x0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "Mat::from_rows",
                    format!("row {i} has {} columns, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// Gathers the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Mat) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "Mat::vstack",
                format!("{} vs {} columns", self.cols, other.cols),
            ));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Mat) -> Result<Self> {
        self.zip_with(other, "Mat::add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Result<Self> {
        self.zip_with(other, "Mat::sub", |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Mat) -> Result<()> {
        self.check_same_shape(other, "Mat::add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    fn zip_with(&self, other: &Mat, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other, op)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub(crate) fn check_same_shape(&self, other: &Mat, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn row_norms(&self) -> Vec<f64> {
        self.row_iter().map(norm).collect()
    }

    /// Column sums as a 1 x cols matrix.
    pub fn column_sums(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        for r in self.row_iter() {
            for (o, v) in out.data.iter_mut().zip(r) {
                *o += v;
            }
        }
        out
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Seeded generator: ChaCha8 keyed by the 64-bit seed through
/// `SeedableRng::seed_from_u64`. The stream is fixed across platforms.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent child stream; used to give each consumer its own sequence.
    pub fn fork(&mut self) -> Self {
        Self::new(self.inner.random())
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    pub fn normal_mat(&mut self, rows: usize, cols: usize, std: f64) -> Mat {
        let data = (0..rows * cols).map(|_| std * self.normal()).collect();
        Mat { rows, cols, data }
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_transb(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.cols {
        return Err(Error::shape(
            "matmul_transb",
            format!("{:?} x {:?}ᵀ", a.shape(), b.shape()),
        ));
    }
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ai = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ai, b.row(j));
        }
    }
    Ok(out)
}

/// Squared Euclidean distances via the expansion identity, negatives clamped to 0.
pub fn pairwise_sq_euclidean(x: &Mat, y: &Mat) -> Result<Mat> {
    if x.cols != y.cols {
        return Err(Error::shape(
            "pairwise_sq_euclidean",
            format!("feature dims {} vs {}", x.cols, y.cols),
        ));
    }
    let xn: Vec<f64> = x.row_iter().map(|r| dot(r, r)).collect();
    let yn: Vec<f64> = y.row_iter().map(|r| dot(r, r)).collect();
    let mut out = matmul_transb(x, y)?;
    for i in 0..x.rows {
        for j in 0..y.rows {
            let v = xn[i] + yn[j] - 2.0 * out[(i, j)];
            // the expansion leaves rounding residue on identical rows
            let identical = v <= 1e-9 * (xn[i] + yn[j]) && x.row(i) == y.row(j);
            out[(i, j)] = if identical { 0.0 } else { v.max(0.0) };
        }
    }
    Ok(out)
}

pub fn pairwise_cosine_sim(x: &Mat, y: &Mat) -> Result<Mat> {
    if x.cols != y.cols {
        return Err(Error::shape(
            "pairwise_cosine_sim",
            format!("feature dims {} vs {}", x.cols, y.cols),
        ));
    }
    let xn = checked_norms(x, "pairwise_cosine_sim")?;
    let yn = checked_norms(y, "pairwise_cosine_sim")?;
    let mut out = matmul_transb(x, y)?;
    for i in 0..x.rows {
        for j in 0..y.rows {
            out[(i, j)] /= xn[i] * yn[j];
        }
    }
    Ok(out)
}

pub(crate) fn checked_norms(x: &Mat, op: &'static str) -> Result<Vec<f64>> {
    let norms = x.row_norms();
    if let Some(i) = norms.iter().position(|&n| !(n >= NORM_FLOOR)) {
        return Err(Error::degenerate(op, format!("row {i} has norm below 1e-12")));
    }
    Ok(norms)
}

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, x: &Mat, h: f64) -> Result<Mat>
where
    F: FnMut(&Mat) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Mat::zeros(x.rows, x.cols);
    for k in 0..x.data.len() {
        let orig = probe.data[k];
        probe.data[k] = orig + h;
        let up = f(&probe);
        probe.data[k] = orig - h;
        let down = f(&probe);
        probe.data[k] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_grad",
            });
        }
        grad.data[k] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Max-norm relative error `max|a - b| / max(max|a|, max|b|, floor)`.
///
/// Scaling by the block's largest magnitude keeps near-zero entries (whose
/// finite-difference residue is pure truncation noise) from dominating.
pub fn max_rel_error(a: &Mat, b: &Mat, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    diff / a.max_abs().max(b.max_abs()).max(floor)
}

/// He-normal initialization: i.i.d. N(0, 2 / fan_in).
pub fn kaiming_init(fan_in: usize, rows: usize, cols: usize, rng: &mut Rng) -> Result<Mat> {
    if fan_in == 0 {
        return Err(Error::Parameter("kaiming_init requires fan_in >= 1".into()));
    }
    Ok(rng.normal_mat(rows, cols, (2.0 / fan_in as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Mat, b: &Mat) -> Mat {
        let mut out = Mat::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                for k in 0..a.cols() {
                    out[(i, j)] += a[(i, k)] * b[(k, j)];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut rng = Rng::new(1);
        let a = rng.normal_mat(3, 3, 1.0);
        assert_eq!(matmul(&Mat::identity(3), &a).unwrap(), a);
        assert_eq!(matmul(&a, &Mat::identity(3)).unwrap(), a);
        let p = matmul(&Mat::row_vector(&[2.0]), &Mat::row_vector(&[3.0])).unwrap();
        assert_eq!(p.as_slice(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(7);
        let a = rng.normal_mat(3, 4, 1.0);
        let b = rng.normal_mat(4, 2, 1.0);
        let got = matmul(&a, &b).unwrap();
        let want = naive_matmul(&a, &b);
        assert!(got.sub(&want).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn matmul_shape_error() {
        let err = matmul(&Mat::zeros(2, 3), &Mat::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn sq_euclidean_cases() {
        let x = Mat::from_rows(&[[0.0], [3.0]]).unwrap();
        let d = pairwise_sq_euclidean(&x, &x).unwrap();
        assert_eq!(d[(0, 0)], 0.0);
        assert_eq!(d[(1, 1)], 0.0);
        assert_eq!(d[(0, 1)], 9.0);

        let mut rng = Rng::new(11);
        let x = rng.normal_mat(5, 3, 1.0);
        let y = rng.normal_mat(4, 3, 1.0);
        let d = pairwise_sq_euclidean(&x, &y).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| (x[(i, k)] - y[(j, k)]).powi(2)).sum();
                assert!((d[(i, j)] - want).abs() < 1e-10);
            }
        }
        assert!(pairwise_sq_euclidean(&x, &Mat::zeros(2, 2)).is_err());
    }

    #[test]
    fn sq_euclidean_zero_diagonal_on_large_values() {
        let mut rng = Rng::new(3);
        let x = rng.normal_mat(20, 16, 1e4);
        let d = pairwise_sq_euclidean(&x, &x).unwrap();
        for i in 0..20 {
            assert_eq!(d[(i, i)], 0.0);
        }
    }

    #[test]
    fn cosine_cases() {
        let a = Mat::from_rows(&[[1.0, 0.0]]).unwrap();
        let b = Mat::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        let s = pairwise_cosine_sim(&a, &b).unwrap();
        assert!((s[(0, 0)] - 1.0).abs() < 1e-15);
        assert_eq!(s[(0, 1)], 0.0);
        assert!((s[(0, 2)] - 2f64.sqrt() / 2.0).abs() < 1e-15);
        let z = Mat::zeros(1, 2);
        assert!(matches!(
            pairwise_cosine_sim(&a, &z),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn finite_diff_simple_functions() {
        let x = Mat::row_vector(&[1.0, 2.0]);
        let g = finite_diff_grad(|m| m.as_slice().iter().map(|v| v * v).sum(), &x, 1e-4).unwrap();
        assert!((g[(0, 0)] - 2.0).abs() < 1e-6);
        assert!((g[(0, 1)] - 4.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 3.5, &x, 1e-4).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert!(finite_diff_grad(|_| f64::NAN, &x, 1e-4).is_err());
        assert!(finite_diff_grad(|_| 0.0, &x, 0.0).is_err());
    }

    #[test]
    fn kaiming_variance_and_determinism() {
        let mut rng = Rng::new(2024);
        let w = kaiming_init(8, 1000, 1000, &mut rng).unwrap();
        let n = w.as_slice().len() as f64;
        let mean = w.sum() / n;
        let var = w.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var - 0.25).abs() < 0.01, "variance {var}");

        let a = kaiming_init(4, 3, 5, &mut Rng::new(9)).unwrap();
        let b = kaiming_init(4, 3, 5, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);

        let w = kaiming_init(2, 400, 500, &mut Rng::new(5)).unwrap();
        let std = (w.as_slice().iter().map(|v| v * v).sum::<f64>() / 200_000.0).sqrt();
        assert!((std - 1.0).abs() < 0.01);

        assert!(kaiming_init(0, 1, 1, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn rng_stream_is_fixed() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        let xs: Vec<f64> = (0..16).map(|_| a.uniform()).collect();
        let ys: Vec<f64> = (0..16).map(|_| b.uniform()).collect();
        assert_eq!(xs, ys);
        assert_ne!(Rng::new(43).uniform(), xs[0]);
    }
}
