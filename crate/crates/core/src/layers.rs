//! Hand-differentiated layers: linear, batch normalization, row-wise L2
//! normalization and ReLU. Each forward returns a cache that its backward
//! consumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{checked_norms, dot, matmul, matmul_transb, Mat};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    /// `out x in`
    pub weight: Mat,
    /// `1 x out`
    pub bias: Option<Mat>,
}

impl LinearParams {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Clone, Debug)]
pub struct LinearCache {
    x: Mat,
    weight: Mat,
    has_bias: bool,
}

#[derive(Clone, Debug)]
pub struct LinearGrads {
    pub dx: Mat,
    pub dweight: Mat,
    pub dbias: Option<Mat>,
}

/// `y = x · Wᵀ (+ b)`.
pub fn linear(x: &Mat, p: &LinearParams) -> Result<(Mat, LinearCache)> {
    if x.cols() != p.in_dim() {
        return Err(Error::shape(
            "linear",
            format!("input has {} features, weight expects {}", x.cols(), p.in_dim()),
        ));
    }
    let mut y = matmul_transb(x, &p.weight)?;
    if let Some(b) = &p.bias {
        if b.shape() != (1, p.out_dim()) {
            return Err(Error::shape("linear", format!("bias shape {:?}", b.shape())));
        }
        for i in 0..y.rows() {
            for (v, bj) in y.row_mut(i).iter_mut().zip(b.as_slice()) {
                *v += bj;
            }
        }
    }
    let cache = LinearCache {
        x: x.clone(),
        weight: p.weight.clone(),
        has_bias: p.bias.is_some(),
    };
    Ok((y, cache))
}

pub fn linear_backward(dy: &Mat, cache: &LinearCache) -> Result<LinearGrads> {
    if dy.shape() != (cache.x.rows(), cache.weight.rows()) {
        return Err(Error::shape(
            "linear_backward",
            format!("upstream gradient shape {:?}", dy.shape()),
        ));
    }
    let dx = matmul(dy, &cache.weight)?;
    let dweight = matmul(&dy.transpose(), &cache.x)?;
    let dbias = cache.has_bias.then(|| dy.column_sums());
    Ok(LinearGrads { dx, dweight, dbias })
}

/// Per-feature batch normalization parameters and running statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnParams {
    pub gamma: Mat,
    pub beta: Mat,
    pub running_mean: Mat,
    pub running_var: Mat,
    pub momentum: f64,
    pub eps: f64,
    /// Number of training batches folded into the running statistics.
    pub batches_seen: u64,
}

impl BnParams {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    /// γ = 1, β = 0, running mean 0 and running variance 1.
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Mat::filled(1, dim, 1.0),
            beta: Mat::zeros(1, dim),
            running_mean: Mat::zeros(1, dim),
            running_var: Mat::filled(1, dim, 1.0),
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
            batches_seen: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.cols()
    }

    /// `running <- (1 - momentum) * running + momentum * batch`, biased variance.
    pub fn update_running(&mut self, cache: &BnCache) -> Result<()> {
        if cache.batch_mean.len() != self.dim() {
            return Err(Error::shape(
                "BnParams::update_running",
                format!("cache over {} features, params over {}", cache.batch_mean.len(), self.dim()),
            ));
        }
        let m = self.momentum;
        for j in 0..self.dim() {
            let rm = &mut self.running_mean.as_mut_slice()[j];
            *rm = (1.0 - m) * *rm + m * cache.batch_mean[j];
            let rv = &mut self.running_var.as_mut_slice()[j];
            *rv = (1.0 - m) * *rv + m * cache.batch_var[j];
        }
        self.batches_seen += 1;
        Ok(())
    }

    fn validate(&self, d: usize, op: &'static str) -> Result<()> {
        for (name, m) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if m.shape() != (1, d) {
                return Err(Error::shape(op, format!("{name} has shape {:?}, expected (1, {d})", m.shape())));
            }
        }
        if !(self.eps >= 0.0) {
            return Err(Error::Parameter(format!("batch-norm eps must be >= 0, got {}", self.eps)));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::Parameter(format!(
                "batch-norm momentum must lie in (0, 1], got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

impl BnCache {
    pub fn batch_mean(&self) -> &[f64] {
        &self.batch_mean
    }

    /// Biased (1/n) batch variance.
    pub fn batch_var(&self) -> &[f64] {
        &self.batch_var
    }
}

#[derive(Clone, Debug)]
pub struct BnGrads {
    pub dx: Mat,
    pub dgamma: Mat,
    pub dbeta: Mat,
}

/// Training-mode normalization with batch statistics. Does not touch the
/// running statistics; see [`batchnorm_train`] for the stateful version.
pub fn batchnorm_forward(x: &Mat, p: &BnParams) -> Result<(Mat, BnCache)> {
    let (n, d) = x.shape();
    p.validate(d, "batchnorm_train")?;
    if n < 2 {
        return Err(Error::BatchSize(n));
    }
    let nf = n as f64;
    let mean: Vec<f64> = x.column_sums().as_slice().iter().map(|s| s / nf).collect();
    let mut var = vec![0.0; d];
    for r in x.row_iter() {
        for j in 0..d {
            var[j] += (r[j] - mean[j]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= nf);
    let mut inv_std = Vec::with_capacity(d);
    for (j, v) in var.iter().enumerate() {
        let denom = v + p.eps;
        if !(denom > 0.0) {
            return Err(Error::degenerate(
                "batchnorm_train",
                format!("feature {j} has zero variance and eps = 0"),
            ));
        }
        inv_std.push(1.0 / denom.sqrt());
    }
    let gamma = p.gamma.as_slice();
    let beta = p.beta.as_slice();
    let mut xhat = Mat::zeros(n, d);
    let mut y = Mat::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let h = (x[(i, j)] - mean[j]) * inv_std[j];
            xhat[(i, j)] = h;
            y[(i, j)] = gamma[j] * h + beta[j];
        }
    }
    let cache = BnCache {
        xhat,
        inv_std,
        gamma: gamma.to_vec(),
        batch_mean: mean,
        batch_var: var,
    };
    Ok((y, cache))
}

/// Training-mode batch normalization; folds the batch statistics into the
/// running estimates.
pub fn batchnorm_train(x: &Mat, p: &mut BnParams) -> Result<(Mat, BnCache)> {
    let (y, cache) = batchnorm_forward(x, p)?;
    p.update_running(&cache)?;
    Ok((y, cache))
}

/// Inference-mode normalization with the running statistics.
pub fn batchnorm_eval(x: &Mat, p: &BnParams) -> Result<Mat> {
    let d = x.cols();
    p.validate(d, "batchnorm_eval")?;
    let mut y = x.clone();
    let (g, b) = (p.gamma.as_slice(), p.beta.as_slice());
    let (rm, rv) = (p.running_mean.as_slice(), p.running_var.as_slice());
    let scale: Vec<f64> = (0..d).map(|j| g[j] / (rv[j] + p.eps).sqrt()).collect();
    for i in 0..y.rows() {
        for (j, v) in y.row_mut(i).iter_mut().enumerate() {
            *v = (*v - rm[j]) * scale[j] + b[j];
        }
    }
    Ok(y)
}

pub fn batchnorm_backward(dy: &Mat, cache: &BnCache) -> Result<BnGrads> {
    let (n, d) = cache.xhat.shape();
    if dy.shape() != (n, d) {
        return Err(Error::shape(
            "batchnorm_backward",
            format!("upstream gradient {:?} vs cached {:?}", dy.shape(), (n, d)),
        ));
    }
    let nf = n as f64;
    let mut dgamma = Mat::zeros(1, d);
    let mut dbeta = Mat::zeros(1, d);
    // sums of dxhat and dxhat * xhat per feature
    let mut s1 = vec![0.0; d];
    let mut s2 = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            let g = dy[(i, j)];
            let h = cache.xhat[(i, j)];
            dgamma.as_mut_slice()[j] += g * h;
            dbeta.as_mut_slice()[j] += g;
            let dh = g * cache.gamma[j];
            s1[j] += dh;
            s2[j] += dh * h;
        }
    }
    let mut dx = Mat::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let dh = dy[(i, j)] * cache.gamma[j];
            let h = cache.xhat[(i, j)];
            dx[(i, j)] = cache.inv_std[j] / nf * (nf * dh - s1[j] - h * s2[j]);
        }
    }
    Ok(BnGrads { dx, dgamma, dbeta })
}

#[derive(Clone, Debug)]
pub struct L2Cache {
    y: Mat,
    norms: Vec<f64>,
}

impl L2Cache {
    pub fn output(&self) -> &Mat {
        &self.y
    }
}

/// Row-wise `x / ‖x‖`.
pub fn l2_normalize(x: &Mat) -> Result<(Mat, L2Cache)> {
    let norms = checked_norms(x, "l2_normalize")?;
    let mut y = x.clone();
    for (i, n) in norms.iter().enumerate() {
        y.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    Ok((y.clone(), L2Cache { y, norms }))
}

/// `dx = (dy - ⟨dy, y⟩ y) / ‖x‖`: the radial component is projected out.
pub fn l2_normalize_backward(dy: &Mat, cache: &L2Cache) -> Result<Mat> {
    if dy.shape() != cache.y.shape() {
        return Err(Error::shape(
            "l2_normalize_backward",
            format!("upstream gradient {:?} vs cached {:?}", dy.shape(), cache.y.shape()),
        ));
    }
    let mut dx = dy.clone();
    for i in 0..dx.rows() {
        let y = cache.y.row(i);
        let radial = dot(dy.row(i), y);
        let n = cache.norms[i];
        for (v, yk) in dx.row_mut(i).iter_mut().zip(y) {
            *v = (*v - radial * yk) / n;
        }
    }
    Ok(dx)
}

#[derive(Clone, Debug)]
pub struct ReluCache {
    active: Vec<bool>,
    shape: (usize, usize),
}

impl ReluCache {
    /// Entries where the input was strictly positive.
    pub fn mask(&self) -> &[bool] {
        &self.active
    }
}

pub fn relu(x: &Mat) -> (Mat, ReluCache) {
    let active = x.as_slice().iter().map(|&v| v > 0.0).collect();
    (
        x.map(|v| v.max(0.0)),
        ReluCache {
            active,
            shape: x.shape(),
        },
    )
}

pub fn relu_backward(dy: &Mat, cache: &ReluCache) -> Result<Mat> {
    if dy.shape() != cache.shape {
        return Err(Error::shape(
            "relu_backward",
            format!("upstream gradient {:?} vs cached {:?}", dy.shape(), cache.shape),
        ));
    }
    let mut dx = dy.clone();
    for (v, &a) in dx.as_mut_slice().iter_mut().zip(&cache.active) {
        if !a {
            *v = 0.0;
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_rel_error, GRAD_CHECK_FLOOR, Rng};

    const TOL: f64 = 1e-4;

    /// Weighted sum `Σ w ⊙ f(x)` turns a vector-valued layer into a scalar probe.
    fn probe(out: &Mat, w: &Mat) -> f64 {
        out.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn linear_identity_and_scalar() {
        let x = Mat::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.0, 4.0]]).unwrap();
        let p = LinearParams {
            weight: Mat::identity(3),
            bias: None,
        };
        assert_eq!(linear(&x, &p).unwrap().0, x);

        let p = LinearParams {
            weight: Mat::row_vector(&[2.5]),
            bias: None,
        };
        let x = Mat::row_vector(&[-1.5]);
        let (_, c) = linear(&x, &p).unwrap();
        let g = linear_backward(&Mat::row_vector(&[1.0]), &c).unwrap();
        assert_eq!(g.dweight.as_slice(), &[-1.5]);
        assert_eq!(g.dx.as_slice(), &[2.5]);
        assert!(g.dbias.is_none());
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = Rng::new(100);
        for _ in 0..20 {
            let x = rng.normal_mat(4, 5, 1.0);
            let p = LinearParams {
                weight: rng.normal_mat(3, 5, 1.0),
                bias: Some(rng.normal_mat(1, 3, 1.0)),
            };
            let w = rng.normal_mat(4, 3, 1.0);
            let (_, c) = linear(&x, &p).unwrap();
            let g = linear_backward(&w, &c).unwrap();
            let fx = finite_diff_grad(|x| probe(&linear(x, &p).unwrap().0, &w), &x, 1e-4).unwrap();
            assert!(max_rel_error(&g.dx, &fx, GRAD_CHECK_FLOOR) < TOL);
            let fw = finite_diff_grad(
                |wt| {
                    let q = LinearParams { weight: wt.clone(), bias: p.bias.clone() };
                    probe(&linear(&x, &q).unwrap().0, &w)
                },
                &p.weight,
                1e-4,
            )
            .unwrap();
            assert!(max_rel_error(&g.dweight, &fw, GRAD_CHECK_FLOOR) < TOL);
            let fb = finite_diff_grad(
                |b| {
                    let q = LinearParams { weight: p.weight.clone(), bias: Some(b.clone()) };
                    probe(&linear(&x, &q).unwrap().0, &w)
                },
                p.bias.as_ref().unwrap(),
                1e-4,
            )
            .unwrap();
            assert!(max_rel_error(g.dbias.as_ref().unwrap(), &fb, GRAD_CHECK_FLOOR) < TOL);
        }
    }

    #[test]
    fn linear_shape_errors() {
        let p = LinearParams { weight: Mat::zeros(2, 3), bias: None };
        assert!(linear(&Mat::zeros(1, 2), &p).is_err());
        let (_, c) = linear(&Mat::zeros(1, 3), &p).unwrap();
        assert!(linear_backward(&Mat::zeros(1, 3), &c).is_err());
    }

    #[test]
    fn batchnorm_two_point_and_zero_gamma() {
        let mut p = BnParams::new(1);
        p.eps = 0.0;
        let x = Mat::from_rows(&[[1.0], [3.0]]).unwrap();
        let (y, _) = batchnorm_train(&x, &mut p).unwrap();
        assert_eq!(y.as_slice(), &[-1.0, 1.0]);

        let mut rng = Rng::new(4);
        let mut p = BnParams::new(3);
        p.gamma = Mat::zeros(1, 3);
        p.beta = Mat::row_vector(&[0.5, -1.0, 2.0]);
        let (y, _) = batchnorm_forward(&rng.normal_mat(6, 3, 2.0), &p).unwrap();
        for r in y.row_iter() {
            assert_eq!(r, p.beta.as_slice());
        }
    }

    #[test]
    fn batchnorm_small_batch_is_rejected() {
        let mut p = BnParams::new(2);
        assert!(matches!(
            batchnorm_train(&Mat::zeros(1, 2), &mut p),
            Err(Error::BatchSize(1))
        ));
        assert_eq!(p.batches_seen, 0);
    }

    #[test]
    fn batchnorm_running_stats_update() {
        let mut p = BnParams::new(1);
        let x = Mat::from_rows(&[[1.0], [3.0]]).unwrap();
        batchnorm_train(&x, &mut p).unwrap();
        // mean 2, biased var 1
        assert!((p.running_mean.as_slice()[0] - 0.2).abs() < 1e-15);
        assert!((p.running_var.as_slice()[0] - 1.0).abs() < 1e-15);
        assert_eq!(p.batches_seen, 1);
    }

    #[test]
    fn batchnorm_standardizes_columns() {
        let mut rng = Rng::new(12);
        let x = rng.normal_mat(32, 6, 3.0).map(|v| v + 5.0);
        let (y, _) = batchnorm_forward(&x, &BnParams::new(6)).unwrap();
        let n = 32.0;
        for j in 0..6 {
            let col: Vec<f64> = (0..32).map(|i| y[(i, j)]).collect();
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn batchnorm_eval_is_affine() {
        let mut rng = Rng::new(13);
        let mut p = BnParams::new(4);
        p.running_mean = rng.normal_mat(1, 4, 1.0);
        p.running_var = rng.normal_mat(1, 4, 1.0).map(|v| v.abs() + 0.1);
        p.gamma = rng.normal_mat(1, 4, 1.0);
        p.beta = rng.normal_mat(1, 4, 1.0);
        let a = rng.normal_mat(3, 4, 1.0);
        let b = rng.normal_mat(3, 4, 1.0);
        let zero = batchnorm_eval(&Mat::zeros(3, 4), &p).unwrap();
        let lhs = batchnorm_eval(&a.scale(0.3).add(&b.scale(0.7)).unwrap(), &p).unwrap();
        let fa = batchnorm_eval(&a, &p).unwrap().sub(&zero).unwrap();
        let fb = batchnorm_eval(&b, &p).unwrap().sub(&zero).unwrap();
        let rhs = fa.scale(0.3).add(&fb.scale(0.7)).unwrap().add(&zero).unwrap();
        assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let mut rng = Rng::new(200);
        for _ in 0..20 {
            let x = rng.normal_mat(8, 5, 1.5);
            let mut p = BnParams::new(5);
            p.gamma = rng.normal_mat(1, 5, 1.0);
            p.beta = rng.normal_mat(1, 5, 1.0);
            let w = rng.normal_mat(8, 5, 1.0);
            let (_, c) = batchnorm_forward(&x, &p).unwrap();
            let g = batchnorm_backward(&w, &c).unwrap();
            let fx = finite_diff_grad(|x| probe(&batchnorm_forward(x, &p).unwrap().0, &w), &x, 1e-4)
                .unwrap();
            assert!(max_rel_error(&g.dx, &fx, GRAD_CHECK_FLOOR) < TOL, "{}", max_rel_error(&g.dx, &fx, GRAD_CHECK_FLOOR));
            let fg = finite_diff_grad(
                |gm| {
                    let mut q = p.clone();
                    q.gamma = gm.clone();
                    probe(&batchnorm_forward(&x, &q).unwrap().0, &w)
                },
                &p.gamma,
                1e-4,
            )
            .unwrap();
            assert!(max_rel_error(&g.dgamma, &fg, GRAD_CHECK_FLOOR) < TOL);
            let fb = finite_diff_grad(
                |bt| {
                    let mut q = p.clone();
                    q.beta = bt.clone();
                    probe(&batchnorm_forward(&x, &q).unwrap().0, &w)
                },
                &p.beta,
                1e-4,
            )
            .unwrap();
            assert!(max_rel_error(&g.dbeta, &fb, GRAD_CHECK_FLOOR) < TOL);
        }
    }

    #[test]
    fn l2_normalize_cases() {
        let (y, _) = l2_normalize(&Mat::row_vector(&[3.0, 4.0])).unwrap();
        assert!((y[(0, 0)] - 0.6).abs() < 1e-15 && (y[(0, 1)] - 0.8).abs() < 1e-15);
        let u = Mat::row_vector(&[0.0, 1.0, 0.0]);
        assert_eq!(l2_normalize(&u).unwrap().0, u);
        assert!(matches!(
            l2_normalize(&Mat::zeros(2, 3)),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn l2_backward_is_tangent_and_matches_finite_differences() {
        let mut rng = Rng::new(300);
        for _ in 0..20 {
            let x = rng.normal_mat(5, 4, 2.0);
            let w = rng.normal_mat(5, 4, 1.0);
            let (y, c) = l2_normalize(&x).unwrap();
            for n in y.row_norms() {
                assert!((n - 1.0).abs() < 1e-12);
            }
            let dx = l2_normalize_backward(&w, &c).unwrap();
            for i in 0..5 {
                assert!(dot(dx.row(i), x.row(i)).abs() < 1e-9);
            }
            let fx = finite_diff_grad(|x| probe(&l2_normalize(x).unwrap().0, &w), &x, 1e-4).unwrap();
            assert!(max_rel_error(&dx, &fx, GRAD_CHECK_FLOOR) < TOL);
        }
    }

    #[test]
    fn relu_cases() {
        let (y, c) = relu(&Mat::row_vector(&[-1.0, 2.0]));
        assert_eq!(y.as_slice(), &[0.0, 2.0]);
        let dx = relu_backward(&Mat::row_vector(&[5.0, 7.0]), &c).unwrap();
        assert_eq!(dx.as_slice(), &[0.0, 7.0]);

        let (y, c) = relu(&Mat::row_vector(&[-1.0, -0.5, 0.0]));
        assert_eq!(y.max_abs(), 0.0);
        assert_eq!(relu_backward(&Mat::filled(1, 3, 1.0), &c).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn relu_backward_matches_finite_differences() {
        let mut rng = Rng::new(400);
        for _ in 0..20 {
            // keep entries away from the kink
            let x = rng.normal_mat(4, 6, 1.0).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
            let w = rng.normal_mat(4, 6, 1.0);
            let (_, c) = relu(&x);
            let dx = relu_backward(&w, &c).unwrap();
            let fx = finite_diff_grad(|x| probe(&relu(x).0, &w), &x, 1e-4).unwrap();
            assert!(max_rel_error(&dx, &fx, GRAD_CHECK_FLOOR) < TOL);
        }
    }
}
