//! Identity classification loss and batch-hard triplet loss, each returning
//! its exact gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{checked_norms, dot, norm, Mat};

/// Floor inside the square root of the rooted Euclidean distance.
pub const EUCLIDEAN_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletMetric {
    /// `‖u - v‖`, floored at `sqrt(1e-12)`.
    Euclidean,
    /// `‖u - v‖²`
    SqEuclidean,
    /// `1 - cos(u, v)`
    CosineDistance,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
    pub metric: TripletMetric,
    /// Use `softplus(d_ap - d_an)` instead of the hinge; `margin` is ignored.
    #[serde(default)]
    pub soft_margin: bool,
}

impl TripletConfig {
    pub const DEFAULT_MARGIN: f64 = 0.3;

    pub fn new(metric: TripletMetric) -> Self {
        Self {
            margin: Self::DEFAULT_MARGIN,
            metric,
            soft_margin: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) {
            return Err(Error::Parameter(format!("triplet margin must be >= 0, got {}", self.margin)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CeConfig {
    #[serde(default)]
    pub label_smoothing: f64,
}

/// Hardest positive and hardest negative per anchor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletIndices {
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
}

impl TripletIndices {
    pub fn len(&self) -> usize {
        self.positive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positive.is_empty()
    }
}

/// Mean smoothed cross-entropy over rows and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Mat, labels: &[usize], cfg: &CeConfig) -> Result<(f64, Mat)> {
    let (n, c) = logits.shape();
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    if n == 0 || c == 0 {
        return Err(Error::shape("softmax_cross_entropy", "empty logits"));
    }
    let eps = cfg.label_smoothing;
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Parameter(format!("label smoothing must lie in [0, 1), got {eps}")));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Label { label, classes: c });
    }
    let nf = n as f64;
    let off = eps / c as f64;
    let mut loss = 0.0;
    let mut grad = Mat::zeros(n, c);
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (j, &z) in row.iter().enumerate() {
            let q = if j == label { 1.0 - eps + off } else { off };
            let logp = z - lse;
            if q > 0.0 {
                loss -= q * logp;
            }
            grad[(i, j)] = (logp.exp() - q) / nf;
        }
    }
    Ok((loss / nf, grad))
}

/// Pairwise distances under `metric`, computed per pair from the raw differences.
pub fn triplet_distances(features: &Mat, metric: TripletMetric) -> Result<Mat> {
    let n = features.rows();
    if metric == TripletMetric::CosineDistance {
        checked_norms(features, "batch_hard_triplet_loss")?;
    }
    let mut d = Mat::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = pair_distance(metric, features.row(i), features.row(j));
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
        d[(i, i)] = pair_distance(metric, features.row(i), features.row(i));
    }
    Ok(d)
}

fn sq_dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn pair_distance(metric: TripletMetric, u: &[f64], v: &[f64]) -> f64 {
    match metric {
        TripletMetric::SqEuclidean => sq_dist(u, v),
        TripletMetric::Euclidean => sq_dist(u, v).max(EUCLIDEAN_FLOOR).sqrt(),
        TripletMetric::CosineDistance => 1.0 - dot(u, v) / (norm(u) * norm(v)),
    }
}

/// Accumulates `coeff * ∂d(u, v)` into the gradient rows of `u` and `v`.
fn add_pair_grad(metric: TripletMetric, features: &Mat, ui: usize, vi: usize, coeff: f64, grad: &mut Mat) {
    let u = features.row(ui);
    let v = features.row(vi);
    let d = u.len();
    let mut du = vec![0.0; d];
    let mut dv = vec![0.0; d];
    match metric {
        TripletMetric::SqEuclidean => {
            for k in 0..d {
                du[k] = 2.0 * (u[k] - v[k]);
                dv[k] = -du[k];
            }
        }
        TripletMetric::Euclidean => {
            let s = sq_dist(u, v);
            if s > EUCLIDEAN_FLOOR {
                let r = s.sqrt();
                for k in 0..d {
                    du[k] = (u[k] - v[k]) / r;
                    dv[k] = -du[k];
                }
            }
        }
        TripletMetric::CosineDistance => {
            let (nu, nv) = (norm(u), norm(v));
            let cos = dot(u, v) / (nu * nv);
            for k in 0..d {
                du[k] = -(v[k] / (nu * nv) - cos * u[k] / (nu * nu));
                dv[k] = -(u[k] / (nu * nv) - cos * v[k] / (nv * nv));
            }
        }
    }
    for (g, x) in grad.row_mut(ui).iter_mut().zip(&du) {
        *g += coeff * x;
    }
    for (g, x) in grad.row_mut(vi).iter_mut().zip(&dv) {
        *g += coeff * x;
    }
}

/// Validates the PK-style precondition: every anchor has a positive and a negative.
pub fn check_batch_composition(labels: &[usize]) -> Result<()> {
    for (a, &la) in labels.iter().enumerate() {
        let has_pos = labels.iter().enumerate().any(|(j, &l)| j != a && l == la);
        let has_neg = labels.iter().any(|&l| l != la);
        if !has_pos || !has_neg {
            return Err(Error::BatchComposition(format!(
                "anchor {a} (label {la}) has no {}",
                if has_pos { "negative" } else { "positive" }
            )));
        }
    }
    Ok(())
}

/// Farthest positive and nearest negative per anchor; ties go to the lowest index.
pub fn batch_hard_mine(dist: &Mat, labels: &[usize]) -> Result<TripletIndices> {
    let n = labels.len();
    if dist.shape() != (n, n) {
        return Err(Error::shape(
            "batch_hard_mine",
            format!("distance matrix {:?} for {n} labels", dist.shape()),
        ));
    }
    check_batch_composition(labels)?;
    let mut positive = Vec::with_capacity(n);
    let mut negative = Vec::with_capacity(n);
    for a in 0..n {
        let mut best_p: Option<(usize, f64)> = None;
        let mut best_n: Option<(usize, f64)> = None;
        for j in 0..n {
            let d = dist[(a, j)];
            if labels[j] == labels[a] {
                if j != a && best_p.is_none_or(|(_, bd)| d > bd) {
                    best_p = Some((j, d));
                }
            } else if best_n.is_none_or(|(_, bd)| d < bd) {
                best_n = Some((j, d));
            }
        }
        // composition was checked above
        positive.push(best_p.map(|(j, _)| j).unwrap_or(a));
        negative.push(best_n.map(|(j, _)| j).unwrap_or(a));
    }
    Ok(TripletIndices { positive, negative })
}

#[derive(Clone, Debug)]
pub struct TripletOutput {
    pub loss: f64,
    pub grad: Mat,
    pub indices: TripletIndices,
    /// Number of anchors whose hinge is active (all anchors under soft margin).
    pub active: usize,
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Batch-hard triplet loss averaged over anchors. The gradient treats the
/// mined indices as fixed.
pub fn batch_hard_triplet_loss(features: &Mat, labels: &[usize], cfg: &TripletConfig) -> Result<TripletOutput> {
    cfg.validate()?;
    let n = features.rows();
    if labels.len() != n {
        return Err(Error::shape(
            "batch_hard_triplet_loss",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    let dist = triplet_distances(features, cfg.metric)?;
    let indices = batch_hard_mine(&dist, labels)?;
    let nf = n as f64;
    let mut loss = 0.0;
    let mut active = 0;
    let mut grad = Mat::zeros(n, features.cols());
    for a in 0..n {
        let (p, q) = (indices.positive[a], indices.negative[a]);
        let gap = dist[(a, p)] - dist[(a, q)];
        let coeff = if cfg.soft_margin {
            loss += softplus(gap);
            active += 1;
            sigmoid(gap)
        } else {
            let z = gap + cfg.margin;
            if z > 0.0 {
                loss += z;
                active += 1;
                1.0
            } else {
                0.0
            }
        };
        if coeff != 0.0 {
            add_pair_grad(cfg.metric, features, a, p, coeff / nf, &mut grad);
            add_pair_grad(cfg.metric, features, a, q, -coeff / nf, &mut grad);
        }
    }
    Ok(TripletOutput {
        loss: loss / nf,
        grad,
        indices,
        active,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::l2_normalize;
    use crate::numerics::{finite_diff_grad, max_rel_error, GRAD_CHECK_FLOOR, pairwise_cosine_sim, pairwise_sq_euclidean, Rng};
    use proptest::prelude::*;

    const METRICS: [TripletMetric; 3] = [
        TripletMetric::Euclidean,
        TripletMetric::SqEuclidean,
        TripletMetric::CosineDistance,
    ];

    fn pk_labels(p: usize, k: usize) -> Vec<usize> {
        (0..p * k).map(|i| i / k).collect()
    }

    /// Enumerates every (a, p, n) triplet and keeps the one with the largest
    /// `d_ap - d_an` per anchor.
    fn brute_force_loss(x: &Mat, labels: &[usize], cfg: &TripletConfig) -> (f64, Vec<(usize, usize)>) {
        let n = x.rows();
        let d = |i: usize, j: usize| -> f64 {
            let (u, v) = (x.row(i), x.row(j));
            let s: f64 = u.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum();
            match cfg.metric {
                TripletMetric::SqEuclidean => s,
                TripletMetric::Euclidean => s.max(1e-12).sqrt(),
                TripletMetric::CosineDistance => {
                    let uv: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
                    let uu: f64 = u.iter().map(|a| a * a).sum();
                    let vv: f64 = v.iter().map(|a| a * a).sum();
                    1.0 - uv / (uu.sqrt() * vv.sqrt())
                }
            }
        };
        let mut total = 0.0;
        let mut picks = Vec::new();
        for a in 0..n {
            let mut best: Option<(f64, usize, usize)> = None;
            for p in 0..n {
                if p == a || labels[p] != labels[a] {
                    continue;
                }
                for q in 0..n {
                    if labels[q] == labels[a] {
                        continue;
                    }
                    let gap = d(a, p) - d(a, q);
                    if best.is_none_or(|(g, _, _)| gap > g) {
                        best = Some((gap, p, q));
                    }
                }
            }
            let (gap, p, q) = best.unwrap();
            picks.push((p, q));
            total += if cfg.soft_margin {
                (1.0 + gap.exp()).ln()
            } else {
                (gap + cfg.margin).max(0.0)
            };
        }
        (total / n as f64, picks)
    }

    #[test]
    fn mine_direct_readout() {
        let dist = Mat::from_rows(&[
            [0.0, 2.0, 1.0, 5.0],
            [2.0, 0.0, 3.0, 4.0],
            [1.0, 3.0, 0.0, 6.0],
            [5.0, 4.0, 6.0, 0.0],
        ])
        .unwrap();
        let idx = batch_hard_mine(&dist, &[0, 0, 1, 1]).unwrap();
        assert_eq!(idx.positive[0], 1);
        assert_eq!(idx.negative[0], 2);
    }

    #[test]
    fn mine_ties_break_low() {
        let dist = Mat::zeros(4, 4);
        let idx = batch_hard_mine(&dist, &[0, 1, 0, 1]).unwrap();
        assert_eq!(idx.positive, vec![2, 3, 0, 1]);
        assert_eq!(idx.negative, vec![1, 0, 1, 0]);
    }

    #[test]
    fn mine_rejects_bad_batches() {
        let dist = Mat::zeros(3, 3);
        assert!(matches!(
            batch_hard_mine(&dist, &[0, 0, 1]),
            Err(Error::BatchComposition(_))
        ));
        assert!(matches!(
            batch_hard_mine(&dist, &[0, 0, 0]),
            Err(Error::BatchComposition(_))
        ));
    }

    #[test]
    fn mine_matches_exhaustive_search() {
        let mut rng = Rng::new(21);
        for _ in 0..20 {
            let x = rng.normal_mat(16, 3, 1.0);
            let labels = pk_labels(4, 4);
            let dist = pairwise_sq_euclidean(&x, &x).unwrap();
            let idx = batch_hard_mine(&dist, &labels).unwrap();
            for a in 0..16 {
                let mut bp = None;
                let mut bn = None;
                for j in 0..16 {
                    if j != a && labels[j] == labels[a] && bp.is_none_or(|p: usize| dist[(a, j)] > dist[(a, p)]) {
                        bp = Some(j);
                    }
                    if labels[j] != labels[a] && bn.is_none_or(|q: usize| dist[(a, j)] < dist[(a, q)]) {
                        bn = Some(j);
                    }
                }
                assert_eq!(idx.positive[a], bp.unwrap());
                assert_eq!(idx.negative[a], bn.unwrap());
            }
        }
    }

    #[test]
    fn degenerate_all_equal_gives_margin() {
        let x = Mat::filled(6, 3, 0.7);
        for metric in METRICS {
            let out = batch_hard_triplet_loss(&x, &pk_labels(2, 3), &TripletConfig::new(metric)).unwrap();
            assert!((out.loss - 0.3).abs() < 1e-12, "{metric:?}: {}", out.loss);
        }
    }

    #[test]
    fn separated_classes_give_zero() {
        let x = Mat::from_rows(&[[0.0, 0.0], [0.0, 0.0], [10.0, 0.0], [10.0, 0.0]]).unwrap();
        let out = batch_hard_triplet_loss(&x, &[0, 0, 1, 1], &TripletConfig::new(TripletMetric::Euclidean)).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.grad.max_abs(), 0.0);
        assert_eq!(out.active, 0);
    }

    #[test]
    fn cosine_rejects_zero_rows() {
        let x = Mat::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        let err = batch_hard_triplet_loss(&x, &[0, 0, 1, 1], &TripletConfig::new(TripletMetric::CosineDistance));
        assert!(matches!(err, Err(Error::Degenerate { .. })));
    }

    #[test]
    fn loss_and_gradient_match_brute_force() {
        let mut rng = Rng::new(31);
        let labels = pk_labels(2, 4);
        for metric in METRICS {
            for soft_margin in [false, true] {
                let cfg = TripletConfig { margin: 0.3, metric, soft_margin };
                for _ in 0..10 {
                    let x = rng.normal_mat(8, 4, 1.0);
                    let out = batch_hard_triplet_loss(&x, &labels, &cfg).unwrap();
                    let (bf, picks) = brute_force_loss(&x, &labels, &cfg);
                    assert!((out.loss - bf).abs() < 1e-12);
                    for (a, (p, q)) in picks.into_iter().enumerate() {
                        assert_eq!((out.indices.positive[a], out.indices.negative[a]), (p, q));
                    }
                    let fd = finite_diff_grad(|x| brute_force_loss(x, &labels, &cfg).0, &x, 1e-4).unwrap();
                    assert!(max_rel_error(&out.grad, &fd, GRAD_CHECK_FLOOR) < 1e-4, "{metric:?}");
                }
            }
        }
    }

    #[test]
    fn unselected_anchor_has_zero_grad() {
        // class 2 sits far away: its anchors are inactive and nobody mines them
        let x = Mat::from_rows(&[
            [0.0, 0.0],
            [0.5, 0.0],
            [0.3, 0.0],
            [0.7, 0.0],
            [100.0, 0.0],
            [100.05, 0.0],
        ])
        .unwrap();
        let labels = [0, 0, 1, 1, 2, 2];
        let cfg = TripletConfig::new(TripletMetric::Euclidean);
        let out = batch_hard_triplet_loss(&x, &labels, &cfg).unwrap();
        let dist = triplet_distances(&x, cfg.metric).unwrap();
        let mut involved = [false; 6];
        for a in 0..6 {
            let (p, q) = (out.indices.positive[a], out.indices.negative[a]);
            if dist[(a, p)] - dist[(a, q)] + cfg.margin > 0.0 {
                involved[a] = true;
                involved[p] = true;
                involved[q] = true;
            }
        }
        assert!(!involved[4] && !involved[5]);
        for i in 0..6 {
            if !involved[i] {
                assert!(out.grad.row(i).iter().all(|&g| g == 0.0));
            }
        }
        assert!(out.loss > 0.0);
    }

    #[test]
    fn ce_uniform_and_saturated() {
        let (loss, _) = softmax_cross_entropy(&Mat::zeros(1, 4), &[2], &CeConfig::default()).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        let logits = Mat::row_vector(&[800.0, 0.0, -3.0]);
        let (loss, g) = softmax_cross_entropy(&logits, &[0], &CeConfig::default()).unwrap();
        assert!(loss < 1e-300);
        assert!(g.max_abs() < 1e-300);
    }

    #[test]
    fn ce_label_errors() {
        assert!(matches!(
            softmax_cross_entropy(&Mat::zeros(1, 3), &[3], &CeConfig::default()),
            Err(Error::Label { label: 3, classes: 3 })
        ));
        let cfg = CeConfig { label_smoothing: 1.0 };
        assert!(softmax_cross_entropy(&Mat::zeros(1, 3), &[0], &cfg).is_err());
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = Rng::new(41);
        for smoothing in [0.0, 0.1] {
            let cfg = CeConfig { label_smoothing: smoothing };
            for _ in 0..10 {
                let logits = rng.normal_mat(5, 4, 2.0);
                let labels: Vec<usize> = (0..5).map(|_| rng.below(4)).collect();
                let (_, g) = softmax_cross_entropy(&logits, &labels, &cfg).unwrap();
                let fd = finite_diff_grad(|z| softmax_cross_entropy(z, &labels, &cfg).unwrap().0, &logits, 1e-4)
                    .unwrap();
                assert!(max_rel_error(&g, &fd, GRAD_CHECK_FLOOR) < 1e-4);
            }
        }
    }

    fn batch_strategy() -> impl Strategy<Value = (Vec<f64>, u64)> {
        (prop::collection::vec(-3.0f64..3.0, 8 * 3), any::<u64>())
    }

    proptest! {
        #[test]
        fn hinge_nonnegative_and_zero_iff_satisfied((vals, _) in batch_strategy(), margin in 0.0f64..1.0) {
            let x = Mat::from_vec(8, 3, vals).unwrap();
            let labels = pk_labels(2, 4);
            let cfg = TripletConfig { margin, metric: TripletMetric::SqEuclidean, soft_margin: false };
            let out = batch_hard_triplet_loss(&x, &labels, &cfg).unwrap();
            prop_assert!(out.loss >= 0.0);
            let dist = triplet_distances(&x, cfg.metric).unwrap();
            let all_ok = (0..8).all(|a| dist[(a, out.indices.negative[a])] >= dist[(a, out.indices.positive[a])] + margin);
            prop_assert_eq!(out.loss == 0.0, all_ok);
        }

        #[test]
        fn cosine_loss_is_scale_invariant((vals, _) in batch_strategy(), c in 0.01f64..100.0) {
            let x = Mat::from_vec(8, 3, vals).unwrap();
            prop_assume!(x.row_norms().iter().all(|&n| n > 1e-3));
            let labels = pk_labels(4, 2);
            let cfg = TripletConfig::new(TripletMetric::CosineDistance);
            let a = batch_hard_triplet_loss(&x, &labels, &cfg).unwrap().loss;
            let b = batch_hard_triplet_loss(&x.scale(c), &labels, &cfg).unwrap().loss;
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn normalized_mining_agrees_across_metrics((vals, _) in batch_strategy()) {
            let x = Mat::from_vec(8, 3, vals).unwrap();
            prop_assume!(x.row_norms().iter().all(|&n| n > 1e-3));
            let (y, _) = l2_normalize(&x).unwrap();
            let labels = pk_labels(2, 4);
            let sq = pairwise_sq_euclidean(&y, &y).unwrap();
            let cos = pairwise_cosine_sim(&y, &y).unwrap().map(|s| 1.0 - s);
            for i in 0..8 {
                for j in 0..8 {
                    prop_assert!((sq[(i, j)] - 2.0 * cos[(i, j)]).abs() < 1e-9);
                }
            }
            prop_assert_eq!(batch_hard_mine(&sq, &labels).unwrap(), batch_hard_mine(&cos, &labels).unwrap());
        }
    }
}
