//! Measurements of the two geometric mismatches the stronger head removes:
//! disagreement between Euclidean and cosine hard mining, and the angle and
//! radial component of the branch gradients.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::Result;
use crate::layers::{batchnorm_forward, l2_normalize};
use crate::losses::{batch_hard_mine, triplet_distances, TripletMetric};
use crate::numerics::{dot, norm, Mat, Rng};
use crate::pipeline::{
    backbone_feature, backward_branches, forward_loss, Branches, LossConfig, PipelineParams, Variant,
};
use crate::training::pk_sample;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub positive_agreement: f64,
    pub negative_agreement: f64,
    pub n_anchors: usize,
}

/// Fraction of anchors whose hardest positive (negative) is the same sample
/// under squared-Euclidean and cosine distance.
pub fn hardness_consistency(features: &Mat, labels: &[usize]) -> Result<ConsistencyReport> {
    let e = batch_hard_mine(&triplet_distances(features, TripletMetric::SqEuclidean)?, labels)?;
    let c = batch_hard_mine(&triplet_distances(features, TripletMetric::CosineDistance)?, labels)?;
    let n = labels.len();
    let agree = |a: &[usize], b: &[usize]| a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n as f64;
    Ok(ConsistencyReport {
        positive_agreement: agree(&e.positive, &c.positive),
        negative_agreement: agree(&e.negative, &c.negative),
        n_anchors: n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradDirectionReport {
    pub variant: Variant,
    /// Mean over samples of cos(CE-branch grad, triplet-branch grad) at
    /// `f_t`; samples where either gradient vanishes are skipped, and the
    /// value is absent when no sample remains.
    pub mean_branch_cosine: Option<f64>,
    /// Max over samples of |cos(triplet grad, triplet input)|, measured at
    /// `f_i` for the stronger head and at `f_t` for the strong head.
    pub radial_leakage: Option<f64>,
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    (na > 0.0 && nb > 0.0).then(|| dot(a, b) / (na * nb))
}

/// Splits the gradient at `f_t` into its CE and triplet parts using one
/// shared forward pass. Parameters and running statistics are untouched.
pub fn grad_direction_report(
    x: &Mat,
    labels: &[usize],
    params: &PipelineParams,
    variant: Variant,
    loss: &LossConfig,
) -> Result<GradDirectionReport> {
    let fwd = forward_loss(x, labels, params, variant, loss)?;
    let ce = backward_branches(&fwd.cache, params, Branches::CE_ONLY)?;
    let tri = backward_branches(&fwd.cache, params, Branches::TRIPLET_ONLY)?;

    let cosines: Vec<f64> = (0..x.rows())
        .filter_map(|i| cosine(ce.d_ft.row(i), tri.d_ft.row(i)))
        .collect();
    let mean_branch_cosine = (!cosines.is_empty()).then(|| cosines.iter().sum::<f64>() / cosines.len() as f64);

    let (grad, input) = match &tri.d_fi_triplet {
        Some(g) => (g, fwd.cache.bn_output()),
        None => (&tri.d_ft, fwd.cache.backbone_output()),
    };
    let radial_leakage = (0..x.rows())
        .filter_map(|i| cosine(grad.row(i), input.row(i)).map(f64::abs))
        .reduce(f64::max);
    Ok(GradDirectionReport {
        variant,
        mean_branch_cosine,
        radial_leakage,
    })
}

/// Which representation of a batch feeds [`hardness_consistency`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSpace {
    /// Flattened input payloads.
    Raw,
    /// Backbone output `f_t`.
    Ft,
    /// Train-mode BN output `f_i`.
    Fi,
}

impl std::str::FromStr for FeatureSpace {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "raw" => Ok(FeatureSpace::Raw),
            "ft" => Ok(FeatureSpace::Ft),
            "fi" => Ok(FeatureSpace::Fi),
            other => Err(format!("unknown feature space {other:?} (expected raw, ft or fi)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnoseConfig {
    pub batches: usize,
    pub features: FeatureSpace,
    /// L2-normalize the features before comparing the two minings.
    pub normalize_first: bool,
    pub p: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            batches: 8,
            features: FeatureSpace::Raw,
            normalize_first: false,
            p: 8,
            k: 4,
            seed: 0,
        }
    }
}

/// One batch: mining agreement plus both heads' gradient statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub batch_id: usize,
    pub consistency: ConsistencyReport,
    pub strong: GradDirectionReport,
    pub stronger: GradDirectionReport,
}

pub const DIAGNOSTICS_COLUMNS: [&str; 7] = [
    "batch_id",
    "positive_agreement",
    "negative_agreement",
    "mean_branch_cosine_strong",
    "radial_leakage_strong",
    "mean_branch_cosine_stronger",
    "radial_leakage_stronger",
];

/// Samples `cfg.batches` PK batches from the train split and measures each.
pub fn diagnose_batches(
    ds: &Dataset,
    params: &PipelineParams,
    loss: &LossConfig,
    cfg: &DiagnoseConfig,
) -> Result<Vec<DiagnosticsRow>> {
    let train = ds.indices(Split::Train);
    let labels = ds.train_labels(&train)?;
    let mut rng = Rng::new(cfg.seed);
    let mut rows = Vec::with_capacity(cfg.batches);
    for batch_id in 0..cfg.batches {
        let picks = pk_sample(&labels, cfg.p, cfg.k, &mut rng)?;
        let idx: Vec<usize> = picks.iter().map(|&j| train[j]).collect();
        let batch_labels: Vec<usize> = picks.iter().map(|&j| labels[j]).collect();
        let x = ds.features(&idx)?;
        let strong = grad_direction_report(&x, &batch_labels, params, Variant::Strong, loss)?;
        let stronger = grad_direction_report(&x, &batch_labels, params, Variant::Stronger, loss)?;
        let feats = match cfg.features {
            FeatureSpace::Raw => x,
            FeatureSpace::Ft => backbone_feature(&x, params)?,
            FeatureSpace::Fi => batchnorm_forward(&backbone_feature(&x, params)?, &params.bn)?.0,
        };
        let feats = if cfg.normalize_first { l2_normalize(&feats)?.0 } else { feats };
        rows.push(DiagnosticsRow {
            batch_id,
            consistency: hardness_consistency(&feats, &batch_labels)?,
            strong,
            stronger,
        });
    }
    Ok(rows)
}

pub fn write_diagnostics_csv<W: std::io::Write>(rows: &[DiagnosticsRow], out: W) -> std::result::Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DIAGNOSTICS_COLUMNS)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.batch_id.to_string(),
            r.consistency.positive_agreement.to_string(),
            r.consistency.negative_agreement.to_string(),
            opt(r.strong.mean_branch_cosine),
            opt(r.strong.radial_leakage),
            opt(r.stronger.mean_branch_cosine),
            opt(r.stronger.radial_leakage),
        ])?;
    }
    w.flush()?;
    Ok(())
}
