//! The two BNNeck heads over a small MLP backbone.
//!
//! Both variants compute `f_t = backbone(x)` and `f_i = BN(f_t)`, and feed
//! `f_i` to a bias-free classifier for the cross-entropy term. They differ
//! only in where the triplet loss is attached:
//!
//! * [`Variant::Strong`]: triplet loss on `f_t` (Euclidean by default).
//! * [`Variant::Stronger`]: triplet loss on `L2(f_i)` (cosine distance by default).
//!
//! Retrieval uses `f_i` computed with the BN running statistics for both.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    batchnorm_backward, batchnorm_eval, batchnorm_forward, l2_normalize, l2_normalize_backward, linear,
    linear_backward, relu, relu_backward, BnCache, BnParams, L2Cache, LinearCache, LinearParams, ReluCache,
};
use crate::losses::{
    batch_hard_triplet_loss, softmax_cross_entropy, CeConfig, TripletConfig, TripletIndices, TripletMetric,
};
use crate::numerics::{kaiming_init, Mat, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Strong,
    Stronger,
}

impl Variant {
    pub const ALL: [Variant; 2] = [Variant::Strong, Variant::Stronger];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Strong => "strong",
            Variant::Stronger => "stronger",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strong" => Ok(Variant::Strong),
            "stronger" => Ok(Variant::Stronger),
            other => Err(Error::Parameter(format!(
                "unknown variant {other:?} (expected strong or stronger)"
            ))),
        }
    }
}

/// Loss settings for both heads. The triplet settings are kept per variant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub ce: CeConfig,
    pub strong_triplet: TripletConfig,
    pub stronger_triplet: TripletConfig,
    pub ce_weight: f64,
    pub triplet_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            ce: CeConfig::default(),
            strong_triplet: TripletConfig::new(TripletMetric::Euclidean),
            stronger_triplet: TripletConfig::new(TripletMetric::CosineDistance),
            ce_weight: 1.0,
            triplet_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn triplet(&self, variant: Variant) -> &TripletConfig {
        match variant {
            Variant::Strong => &self.strong_triplet,
            Variant::Stronger => &self.stronger_triplet,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.strong_triplet.validate()?;
        self.stronger_triplet.validate()?;
        if !(0.0..1.0).contains(&self.ce.label_smoothing) {
            return Err(Error::Parameter(format!(
                "label smoothing must lie in [0, 1), got {}",
                self.ce.label_smoothing
            )));
        }
        if !(self.ce_weight >= 0.0) || !(self.triplet_weight >= 0.0) {
            return Err(Error::Parameter("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Layer widths of the MLP backbone: `input -> hidden... -> feature_dim`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![64],
            feature_dim: 32,
            num_classes,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Parameter("layer widths must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Parameter(format!(
                "need at least 2 identities, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    /// Linear layers with ReLU between consecutive layers (not after the last).
    pub backbone: Vec<LinearParams>,
    /// The BNNeck over `f_t`.
    pub bn: BnParams,
    /// `num_classes x feature_dim`, no bias.
    pub classifier: LinearParams,
    /// Bumped on every parameter update; forward caches record it.
    pub generation: u64,
}

impl PipelineParams {
    /// Kaiming-normal weights (fan-in), zero biases, γ = 1, β = 0.
    pub fn init(arch: &Architecture, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut dims = vec![arch.input_dim];
        dims.extend_from_slice(&arch.hidden);
        dims.push(arch.feature_dim);
        let mut backbone = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            backbone.push(LinearParams {
                weight: kaiming_init(w[0], w[1], w[0], rng)?,
                bias: Some(Mat::zeros(1, w[1])),
            });
        }
        let classifier = LinearParams {
            weight: kaiming_init(arch.feature_dim, arch.num_classes, arch.feature_dim, rng)?,
            bias: None,
        };
        Ok(Self {
            backbone,
            bn: BnParams::new(arch.feature_dim),
            classifier,
            generation: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.backbone[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.bn.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out_dim()
    }

    /// Checks the chained shapes and the no-bias classifier.
    pub fn validate(&self) -> Result<()> {
        if self.backbone.is_empty() {
            return Err(Error::Parameter("backbone needs at least one layer".into()));
        }
        for (i, w) in self.backbone.windows(2).enumerate() {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::shape(
                    "PipelineParams",
                    format!("backbone layer {i} emits {} but layer {} expects {}", w[0].out_dim(), i + 1, w[1].in_dim()),
                ));
            }
        }
        let d_t = self.backbone.last().map(LinearParams::out_dim).unwrap_or(0);
        if self.bn.dim() != d_t || self.classifier.in_dim() != d_t {
            return Err(Error::shape(
                "PipelineParams",
                format!("backbone emits {d_t} features, BN has {}, classifier expects {}", self.bn.dim(), self.classifier.in_dim()),
            ));
        }
        if self.classifier.bias.is_some() {
            return Err(Error::Parameter("classifier must not carry a bias".into()));
        }
        Ok(())
    }

    /// Every stored matrix with a stable name, trainable blocks first.
    pub fn named_blocks(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), &l.weight));
            if let Some(b) = &l.bias {
                out.push((format!("backbone.{i}.bias"), b));
            }
        }
        out.push(("bn.gamma".into(), &self.bn.gamma));
        out.push(("bn.beta".into(), &self.bn.beta));
        out.push(("classifier.weight".into(), &self.classifier.weight));
        out.push(("bn.running_mean".into(), &self.bn.running_mean));
        out.push(("bn.running_var".into(), &self.bn.running_var));
        out
    }

    /// Trainable blocks, in the same order as [`ParamGrads::blocks`].
    pub fn trainable_mut(&mut self) -> Vec<TrainableBlock<'_>> {
        let mut out = Vec::new();
        for l in self.backbone.iter_mut() {
            out.push(TrainableBlock { value: &mut l.weight, decay: true });
            if let Some(b) = l.bias.as_mut() {
                out.push(TrainableBlock { value: b, decay: false });
            }
        }
        out.push(TrainableBlock { value: &mut self.bn.gamma, decay: false });
        out.push(TrainableBlock { value: &mut self.bn.beta, decay: false });
        out.push(TrainableBlock { value: &mut self.classifier.weight, decay: true });
        out
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut Mat> {
        if let Some(rest) = name.strip_prefix("backbone.") {
            let (idx, field) = rest.split_once('.')?;
            let layer = self.backbone.get_mut(idx.parse::<usize>().ok()?)?;
            return match field {
                "weight" => Some(&mut layer.weight),
                "bias" => layer.bias.as_mut(),
                _ => None,
            };
        }
        match name {
            "bn.gamma" => Some(&mut self.bn.gamma),
            "bn.beta" => Some(&mut self.bn.beta),
            "bn.running_mean" => Some(&mut self.bn.running_mean),
            "bn.running_var" => Some(&mut self.bn.running_var),
            "classifier.weight" => Some(&mut self.classifier.weight),
            _ => None,
        }
    }
}

/// A parameter matrix the optimizer may update; `decay` marks weight-decayed blocks.
pub struct TrainableBlock<'a> {
    pub value: &'a mut Mat,
    pub decay: bool,
}

#[derive(Clone, Debug)]
struct BackboneCache {
    linear: Vec<LinearCache>,
    relu: Vec<ReluCache>,
}

fn backbone_forward(x: &Mat, layers: &[LinearParams]) -> Result<(Mat, BackboneCache)> {
    let mut h = x.clone();
    let mut cache = BackboneCache {
        linear: Vec::with_capacity(layers.len()),
        relu: Vec::with_capacity(layers.len().saturating_sub(1)),
    };
    for (i, layer) in layers.iter().enumerate() {
        let (y, lc) = linear(&h, layer)?;
        cache.linear.push(lc);
        h = if i + 1 < layers.len() {
            let (r, rc) = relu(&y);
            cache.relu.push(rc);
            r
        } else {
            y
        };
    }
    Ok((h, cache))
}

/// Backbone output `f_t` for a batch; no state is touched.
pub fn backbone_feature(x: &Mat, params: &PipelineParams) -> Result<Mat> {
    Ok(backbone_forward(x, &params.backbone)?.0)
}

/// Forward intermediates for one batch.
#[derive(Clone, Debug)]
pub struct PipelineCache {
    variant: Variant,
    generation: u64,
    shapes: Vec<(usize, usize)>,
    backbone: BackboneCache,
    f_t: Mat,
    bn: BnCache,
    f_i: Mat,
    l2: Option<L2Cache>,
    classifier: LinearCache,
    dlogits: Mat,
    dtriplet: Mat,
    ce_weight: f64,
    triplet_weight: f64,
    indices: TripletIndices,
    hinge_active: Vec<bool>,
}

impl PipelineCache {
    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn backbone_output(&self) -> &Mat {
        &self.f_t
    }

    /// Training-mode BN output.
    pub fn bn_output(&self) -> &Mat {
        &self.f_i
    }

    pub fn bn_cache(&self) -> &BnCache {
        &self.bn
    }

    /// The feature the triplet loss saw: `f_t` or `L2(f_i)`.
    pub fn triplet_input(&self) -> &Mat {
        match &self.l2 {
            Some(l2) => l2.output(),
            None => &self.f_t,
        }
    }

    pub fn triplet_indices(&self) -> &TripletIndices {
        &self.indices
    }

    /// The discrete choices the gradient is conditioned on: ReLU masks,
    /// mined indices and active hinges. Two forward passes with equal
    /// signatures lie in the same smooth piece of the loss.
    pub fn nonsmooth_signature(&self) -> Vec<u64> {
        let mut sig = Vec::new();
        for r in &self.backbone.relu {
            sig.extend(r.mask().iter().map(|&b| b as u64));
        }
        sig.extend(self.indices.positive.iter().map(|&v| v as u64));
        sig.extend(self.indices.negative.iter().map(|&v| v as u64));
        sig.extend(self.hinge_active.iter().map(|&b| b as u64));
        sig
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub total_loss: f64,
    pub ce_loss: f64,
    pub triplet_loss: f64,
    pub cache: PipelineCache,
}

/// Training-mode forward pass and both loss terms.
///
/// BN uses batch statistics; the running statistics are not modified here
/// (fold them in with [`BnParams::update_running`] on [`PipelineCache::bn_cache`]).
pub fn forward_loss(
    x: &Mat,
    labels: &[usize],
    params: &PipelineParams,
    variant: Variant,
    cfg: &LossConfig,
) -> Result<ForwardOutput> {
    params.validate()?;
    cfg.validate()?;
    if x.rows() != labels.len() {
        return Err(Error::shape(
            "forward_loss",
            format!("{} inputs for {} labels", x.rows(), labels.len()),
        ));
    }
    let (f_t, backbone) = backbone_forward(x, &params.backbone)?;
    let (f_i, bn) = batchnorm_forward(&f_t, &params.bn)?;
    let (logits, classifier) = linear(&f_i, &params.classifier)?;
    let (ce_loss, dlogits) = softmax_cross_entropy(&logits, labels, &cfg.ce)?;

    let tcfg = cfg.triplet(variant);
    let (l2, trip) = match variant {
        Variant::Strong => (None, batch_hard_triplet_loss(&f_t, labels, tcfg)?),
        Variant::Stronger => {
            let (z, l2) = l2_normalize(&f_i)?;
            let out = batch_hard_triplet_loss(&z, labels, tcfg)?;
            (Some(l2), out)
        }
    };
    let input = l2.as_ref().map_or(&f_t, |c| c.output());
    let hinge_active = hinge_flags(input, &trip.indices, tcfg)?;

    let total_loss = cfg.ce_weight * ce_loss + cfg.triplet_weight * trip.loss;
    let shapes = params.named_blocks().iter().map(|(_, m)| m.shape()).collect();
    Ok(ForwardOutput {
        total_loss,
        ce_loss,
        triplet_loss: trip.loss,
        cache: PipelineCache {
            variant,
            generation: params.generation,
            shapes,
            backbone,
            f_t,
            bn,
            f_i,
            l2,
            classifier,
            dlogits,
            dtriplet: trip.grad,
            ce_weight: cfg.ce_weight,
            triplet_weight: cfg.triplet_weight,
            indices: trip.indices,
            hinge_active,
        },
    })
}

fn hinge_flags(input: &Mat, idx: &TripletIndices, cfg: &TripletConfig) -> Result<Vec<bool>> {
    if cfg.soft_margin {
        return Ok(vec![true; idx.len()]);
    }
    let d = crate::losses::triplet_distances(input, cfg.metric)?;
    Ok((0..idx.len())
        .map(|a| d[(a, idx.positive[a])] - d[(a, idx.negative[a])] + cfg.margin > 0.0)
        .collect())
}

/// Gradients laid out like [`PipelineParams::trainable_mut`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub backbone_weight: Vec<Mat>,
    pub backbone_bias: Vec<Option<Mat>>,
    pub gamma: Mat,
    pub beta: Mat,
    pub classifier: Mat,
}

impl ParamGrads {
    pub fn blocks(&self) -> Vec<&Mat> {
        let mut out = Vec::new();
        for (w, b) in self.backbone_weight.iter().zip(&self.backbone_bias) {
            out.push(w);
            if let Some(b) = b {
                out.push(b);
            }
        }
        out.push(&self.gamma);
        out.push(&self.beta);
        out.push(&self.classifier);
        out
    }

    /// Gradient for a named block (see [`PipelineParams::named_blocks`]).
    pub fn block(&self, name: &str) -> Option<&Mat> {
        if let Some(rest) = name.strip_prefix("backbone.") {
            let (idx, field) = rest.split_once('.')?;
            let i = idx.parse::<usize>().ok()?;
            return match field {
                "weight" => self.backbone_weight.get(i),
                "bias" => self.backbone_bias.get(i)?.as_ref(),
                _ => None,
            };
        }
        match name {
            "bn.gamma" => Some(&self.gamma),
            "bn.beta" => Some(&self.beta),
            "classifier.weight" => Some(&self.classifier),
            _ => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|m| m.is_finite())
    }
}

/// Which loss terms to backpropagate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Branches {
    pub ce: bool,
    pub triplet: bool,
}

impl Branches {
    pub const ALL: Branches = Branches { ce: true, triplet: true };
    pub const CE_ONLY: Branches = Branches { ce: true, triplet: false };
    pub const TRIPLET_ONLY: Branches = Branches { ce: false, triplet: true };
}

#[derive(Clone, Debug)]
pub struct BackwardOutput {
    pub grads: ParamGrads,
    /// Gradient arriving at `f_t`.
    pub d_ft: Mat,
    /// Triplet-branch gradient arriving at `f_i` (stronger variant only).
    pub d_fi_triplet: Option<Mat>,
}

/// Exact gradients of `total_loss` for every trainable block.
pub fn backward(cache: &PipelineCache, params: &PipelineParams) -> Result<ParamGrads> {
    Ok(backward_branches(cache, params, Branches::ALL)?.grads)
}

/// Backward restricted to a subset of loss terms. Since the total is a sum,
/// the CE-only and triplet-only passes add up to the full one.
pub fn backward_branches(cache: &PipelineCache, params: &PipelineParams, branches: Branches) -> Result<BackwardOutput> {
    if cache.generation != params.generation {
        return Err(Error::Usage(format!(
            "cache from parameter generation {}, params at {}",
            cache.generation, params.generation
        )));
    }
    let shapes: Vec<_> = params.named_blocks().iter().map(|(_, m)| m.shape()).collect();
    if shapes != cache.shapes {
        return Err(Error::Usage("parameter shapes differ from the forward pass".into()));
    }

    let (n, d) = cache.f_i.shape();
    let mut d_fi = Mat::zeros(n, d);
    let mut classifier = Mat::zeros(params.classifier.out_dim(), params.classifier.in_dim());
    if branches.ce {
        let g = linear_backward(&cache.dlogits.scale(cache.ce_weight), &cache.classifier)?;
        d_fi.add_assign(&g.dx)?;
        classifier = g.dweight;
    }

    let mut d_fi_triplet = None;
    let mut d_ft_direct = Mat::zeros(n, d);
    if branches.triplet {
        let dtrip = cache.dtriplet.scale(cache.triplet_weight);
        match &cache.l2 {
            Some(l2) => {
                let g = l2_normalize_backward(&dtrip, l2)?;
                d_fi.add_assign(&g)?;
                d_fi_triplet = Some(g);
            }
            None => d_ft_direct = dtrip,
        }
    } else if cache.l2.is_some() {
        d_fi_triplet = Some(Mat::zeros(n, d));
    }

    let bn = batchnorm_backward(&d_fi, &cache.bn)?;
    let mut d_ft = bn.dx;
    d_ft.add_assign(&d_ft_direct)?;

    let layers = params.backbone.len();
    let mut backbone_weight = vec![Mat::zeros(0, 0); layers];
    let mut backbone_bias = vec![None; layers];
    let mut upstream = d_ft.clone();
    for i in (0..layers).rev() {
        if i + 1 < layers {
            upstream = relu_backward(&upstream, &cache.backbone.relu[i])?;
        }
        let g = linear_backward(&upstream, &cache.backbone.linear[i])?;
        backbone_weight[i] = g.dweight;
        backbone_bias[i] = g.dbias;
        upstream = g.dx;
    }

    Ok(BackwardOutput {
        grads: ParamGrads {
            backbone_weight,
            backbone_bias,
            gamma: bn.dgamma,
            beta: bn.dbeta,
            classifier,
        },
        d_ft,
        d_fi_triplet,
    })
}

/// Retrieval feature `f_i = BN_eval(backbone(x))`, identical for both variants.
pub fn inference_feature(x: &Mat, params: &PipelineParams) -> Result<Mat> {
    params.validate()?;
    if params.bn.batches_seen == 0 {
        return Err(Error::State(
            "BN running statistics are unpopulated; train on at least one batch first".into(),
        ));
    }
    let f_t = backbone_feature(x, params)?;
    batchnorm_eval(&f_t, &params.bn)
}
