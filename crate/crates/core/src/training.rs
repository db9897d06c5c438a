//! PK sampling, warmup + multistep learning-rate schedules, Adam and SGD
//! with momentum, and the epoch loop.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{horizontal_flip, random_erasing, Dataset, EraseFill, ErasingConfig, Payload, Split};
use crate::error::{Error, Result};
use crate::eval::{compute_dist_matrix, evaluate_market, DistMetric};
use crate::numerics::{Mat, Rng};
use crate::pipeline::{backward, forward_loss, inference_feature, Architecture, LossConfig, PipelineParams, TrainableBlock, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub warmup_start_lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub total_epochs: usize,
}

impl Schedule {
    /// Adam recipe: warmup 3.5e-6 -> 3.5e-4 over 10 epochs, decay at 30 and 55.
    pub fn market() -> Self {
        Self {
            base_lr: 3.5e-4,
            warmup_epochs: 10,
            warmup_start_lr: 3.5e-6,
            milestones: vec![30, 55],
            gamma: 0.1,
            total_epochs: 120,
        }
    }

    /// SGD recipe: 0.065 without warmup, decay by 0.1 at 150, 225 and 300.
    pub fn submission() -> Self {
        Self {
            base_lr: 0.065,
            warmup_epochs: 0,
            warmup_start_lr: 0.065,
            milestones: vec![150, 225, 300],
            gamma: 0.1,
            total_epochs: 350,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) || !(self.warmup_start_lr >= 0.0) {
            return Err(Error::Parameter("learning rates must be positive and finite".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Parameter(format!("schedule gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter(format!(
                "milestones must be strictly increasing, got {:?}",
                self.milestones
            )));
        }
        if self.milestones.iter().any(|&m| m < self.warmup_epochs) {
            return Err(Error::Parameter(format!(
                "milestones {:?} must not precede the end of warmup ({})",
                self.milestones, self.warmup_epochs
            )));
        }
        Ok(())
    }
}

/// Learning rate for a 0-based epoch; warmup interpolates per epoch.
pub fn lr_at(s: &Schedule, epoch: usize) -> Result<f64> {
    s.validate()?;
    if epoch >= s.total_epochs {
        return Err(Error::Parameter(format!(
            "epoch {epoch} outside schedule of {} epochs",
            s.total_epochs
        )));
    }
    if epoch < s.warmup_epochs {
        let t = epoch as f64 / s.warmup_epochs as f64;
        return Ok(s.warmup_start_lr + (s.base_lr - s.warmup_start_lr) * t);
    }
    let passed = s.milestones.iter().filter(|&&m| m <= epoch).count();
    Ok(s.base_lr * s.gamma.powi(passed as i32))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(format!("unknown optimizer {other:?} (expected adam or sgd)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
    /// L2 coefficient added to the gradient of weight matrices only.
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(self.beta1) || !unit(self.beta2) || !unit(self.momentum) {
            return Err(Error::Parameter("beta1, beta2 and momentum must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Parameter("optimizer eps must be > 0 and weight decay >= 0".into()));
        }
        Ok(())
    }
}

/// Per-block moments (Adam) or velocities (SGD, stored in `first`).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub cfg: OptimConfig,
    pub step: u64,
    first: Vec<Mat>,
    second: Vec<Mat>,
}

impl OptimState {
    pub fn new(cfg: OptimConfig) -> Self {
        Self {
            cfg,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    fn prepare(&mut self, blocks: &[TrainableBlock<'_>], grads: &[&Mat]) -> Result<()> {
        if blocks.len() != grads.len() {
            return Err(Error::shape(
                "optimizer step",
                format!("{} parameter blocks, {} gradient blocks", blocks.len(), grads.len()),
            ));
        }
        for (i, (b, g)) in blocks.iter().zip(grads).enumerate() {
            if b.value.shape() != g.shape() {
                return Err(Error::shape(
                    "optimizer step",
                    format!("block {i}: parameter {:?} vs gradient {:?}", b.value.shape(), g.shape()),
                ));
            }
        }
        if self.first.is_empty() {
            self.first = blocks.iter().map(|b| Mat::zeros(b.value.rows(), b.value.cols())).collect();
            self.second = self.first.clone();
        } else if self.first.len() != blocks.len()
            || self.first.iter().zip(blocks).any(|(m, b)| m.shape() != b.value.shape())
        {
            return Err(Error::shape("optimizer step", "state was built for different parameters"));
        }
        Ok(())
    }
}

fn decayed(g: f64, w: f64, decay: bool, wd: f64) -> f64 {
    if decay {
        g + wd * w
    } else {
        g
    }
}

pub fn adam_step(blocks: &mut [TrainableBlock<'_>], grads: &[&Mat], state: &mut OptimState, lr: f64) -> Result<()> {
    state.prepare(blocks, grads)?;
    state.step += 1;
    let c = state.cfg;
    let bc1 = 1.0 - c.beta1.powi(state.step as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step as i32);
    for (k, b) in blocks.iter_mut().enumerate() {
        let w = b.value.as_mut_slice();
        let m = state.first[k].as_mut_slice();
        let v = state.second[k].as_mut_slice();
        for (i, &g) in grads[k].as_slice().iter().enumerate() {
            let g = decayed(g, w[i], b.decay, c.weight_decay);
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            w[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
        }
    }
    Ok(())
}

pub fn sgd_momentum_step(blocks: &mut [TrainableBlock<'_>], grads: &[&Mat], state: &mut OptimState, lr: f64) -> Result<()> {
    state.prepare(blocks, grads)?;
    state.step += 1;
    let c = state.cfg;
    for (k, b) in blocks.iter_mut().enumerate() {
        let w = b.value.as_mut_slice();
        let vel = state.first[k].as_mut_slice();
        for (i, &g) in grads[k].as_slice().iter().enumerate() {
            let g = decayed(g, w[i], b.decay, c.weight_decay);
            vel[i] = c.momentum * vel[i] + g;
            w[i] -= lr * vel[i];
        }
    }
    Ok(())
}

/// Applies one update of the configured kind and bumps `params.generation`.
pub fn optimizer_step(params: &mut PipelineParams, grads: &[&Mat], state: &mut OptimState, lr: f64) -> Result<()> {
    let mut blocks = params.trainable_mut();
    match state.cfg.kind {
        OptimizerKind::Adam => adam_step(&mut blocks, grads, state, lr)?,
        OptimizerKind::Sgd => sgd_momentum_step(&mut blocks, grads, state, lr)?,
    }
    drop(blocks);
    params.generation += 1;
    Ok(())
}

/// Draws `P` identities without replacement and `K` samples of each.
///
/// Samples are drawn without replacement when the identity has at least `K`
/// of them and with replacement otherwise.
pub fn pk_sample(labels: &[usize], p: usize, k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_id.entry(l).or_default().push(i);
    }
    if by_id.len() < p {
        return Err(Error::Dataset(format!(
            "PK sampling needs {p} identities, the split has {}",
            by_id.len()
        )));
    }
    let mut ids: Vec<&Vec<usize>> = by_id.values().collect();
    rng.shuffle(&mut ids);
    let mut batch = Vec::with_capacity(p * k);
    for members in &ids[..p] {
        if members.len() >= k {
            let mut pool = (*members).clone();
            rng.shuffle(&mut pool);
            batch.extend_from_slice(&pool[..k]);
        } else {
            batch.extend((0..k).map(|_| members[rng.below(members.len())]));
        }
    }
    Ok(batch)
}

/// Flip and random erasing, applied to image payloads only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    pub erasing_probability: f64,
    pub erasing_area: (f64, f64),
    pub erasing_aspect: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            erasing_probability: 0.5,
            erasing_area: (0.02, 0.4),
            erasing_aspect: (0.3, 3.33),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub p: usize,
    pub k: usize,
    pub schedule: Schedule,
    pub optimizer: OptimConfig,
    pub loss: LossConfig,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub seed: u64,
    /// Evaluate on query/gallery after every `eval_every` epochs and after
    /// the last one; 0 disables evaluation.
    pub eval_every: usize,
    pub eval_metric: DistMetric,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Stronger,
            p: 8,
            k: 4,
            schedule: Schedule::market(),
            optimizer: OptimConfig::default(),
            loss: LossConfig::default(),
            hidden: vec![64],
            feature_dim: 32,
            seed: 0,
            eval_every: 10,
            eval_metric: DistMetric::Cosine,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale recipe for the default synthetic data: the warmup and
    /// milestones of [`Schedule::market`] with a 1e-3 peak rate, 60 epochs,
    /// a 128-wide hidden layer and evaluation after every epoch.
    pub fn synthetic_benchmark(variant: Variant, seed: u64) -> Self {
        Self {
            variant,
            seed,
            schedule: Schedule {
                base_lr: 1e-3,
                total_epochs: 60,
                ..Schedule::market()
            },
            hidden: vec![128],
            eval_every: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k < 2 {
            return Err(Error::Parameter(format!("need P >= 2 and K >= 2, got P = {}, K = {}", self.p, self.k)));
        }
        if self.feature_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Parameter("layer widths must be positive".into()));
        }
        self.schedule.validate()?;
        self.optimizer.validate()?;
        self.loss.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0-based epoch index; metrics are measured after it completes.
    pub epoch: usize,
    pub lr: f64,
    pub ce_loss: f64,
    pub triplet_loss: f64,
    pub total_loss: f64,
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
    pub rank1: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: PipelineParams,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    /// Number of epochs until the first evaluation with mAP >= `threshold`.
    pub fn epochs_to_reach(&self, threshold: f64) -> Option<usize> {
        self.history
            .iter()
            .find(|r| r.map.is_some_and(|m| m >= threshold))
            .map(|r| r.epoch + 1)
    }

    pub fn final_map(&self) -> Option<f64> {
        self.history.iter().rev().find_map(|r| r.map)
    }
}

pub const HISTORY_COLUMNS: [&str; 7] = ["epoch", "lr", "ce_loss", "triplet_loss", "total_loss", "mAP", "rank1"];

/// Writes the history as CSV; missing metrics are left empty.
pub fn write_history_csv<W: std::io::Write>(history: &[EpochRecord], out: W) -> std::result::Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HISTORY_COLUMNS)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            r.ce_loss.to_string(),
            r.triplet_loss.to_string(),
            r.total_loss.to_string(),
            opt(r.map),
            opt(r.rank1),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn augment_batch(
    ds: &Dataset,
    batch: &[usize],
    aug: &AugmentConfig,
    fill: &Option<Vec<f64>>,
    rng: &mut Rng,
) -> Result<Mat> {
    let mut rows = Vec::with_capacity(batch.len());
    for &i in batch {
        match &ds.items()[i].payload {
            Payload::Vector(v) => rows.push(v.clone()),
            Payload::Image(img) => {
                let flipped = horizontal_flip(img, aug.flip_probability, rng);
                let erase = ErasingConfig {
                    probability: aug.erasing_probability,
                    area_range: aug.erasing_area,
                    aspect_range: aug.erasing_aspect,
                    fill: EraseFill::Mean {
                        values: fill.clone().unwrap_or_else(|| vec![0.0; img.channels]),
                    },
                };
                rows.push(random_erasing(&flipped, &erase, rng)?.data);
            }
        }
    }
    Mat::from_rows(&rows).map_err(|_| Error::Dataset("payloads differ in length".into()))
}

/// Features and labels of the query and gallery splits.
pub struct EvalSplit {
    pub query: Mat,
    pub gallery: Mat,
    pub q_pids: Vec<i64>,
    pub q_camids: Vec<i64>,
    pub g_pids: Vec<i64>,
    pub g_camids: Vec<i64>,
}

impl EvalSplit {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let q = ds.indices(Split::Query);
        let g = ds.indices(Split::Gallery);
        if q.is_empty() || g.is_empty() {
            return Err(Error::Dataset(format!(
                "evaluation needs query and gallery items, found {} and {}",
                q.len(),
                g.len()
            )));
        }
        Ok(Self {
            query: ds.features(&q)?,
            gallery: ds.features(&g)?,
            q_pids: ds.pids(&q),
            q_camids: ds.camids(&q),
            g_pids: ds.pids(&g),
            g_camids: ds.camids(&g),
        })
    }

    pub fn evaluate(&self, params: &PipelineParams, metric: DistMetric) -> Result<crate::eval::EvalReport> {
        let qf = inference_feature(&self.query, params)?;
        let gf = inference_feature(&self.gallery, params)?;
        let dist = compute_dist_matrix(&qf, &gf, metric)?;
        evaluate_market(&dist, &self.q_pids, &self.q_camids, &self.g_pids, &self.g_camids, 10)
    }
}

pub fn train_run(cfg: &TrainConfig, ds: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_idx = ds.indices(Split::Train);
    let labels = ds.train_labels(&train_idx)?;
    let arch = Architecture {
        input_dim: ds.input_dim()?,
        hidden: cfg.hidden.clone(),
        feature_dim: cfg.feature_dim,
        num_classes: ds.num_train_ids(),
    };
    let mut root = Rng::new(cfg.seed);
    let mut params = PipelineParams::init(&arch, &mut root.fork())?;
    let mut sampler = root.fork();
    let mut aug_rng = root.fork();
    let eval = if cfg.eval_every > 0 && cfg.schedule.total_epochs > 0 {
        Some(EvalSplit::from_dataset(ds)?)
    } else {
        None
    };
    if ds.num_train_ids() < cfg.p {
        return Err(Error::Dataset(format!(
            "PK sampling needs {} identities, the train split has {}",
            cfg.p,
            ds.num_train_ids()
        )));
    }
    let fill = ds.channel_means();
    let iters = (train_idx.len() / (cfg.p * cfg.k)).max(1);
    let mut state = OptimState::new(cfg.optimizer);
    let mut history = Vec::with_capacity(cfg.schedule.total_epochs);

    for epoch in 0..cfg.schedule.total_epochs {
        let lr = lr_at(&cfg.schedule, epoch)?;
        let (mut ce, mut tri, mut tot) = (0.0, 0.0, 0.0);
        for _ in 0..iters {
            let picks = pk_sample(&labels, cfg.p, cfg.k, &mut sampler)?;
            let batch: Vec<usize> = picks.iter().map(|&j| train_idx[j]).collect();
            let batch_labels: Vec<usize> = picks.iter().map(|&j| labels[j]).collect();
            let x = augment_batch(ds, &batch, &cfg.augment, &fill, &mut aug_rng)?;
            let out = forward_loss(&x, &batch_labels, &params, cfg.variant, &cfg.loss)?;
            let grads = backward(&out.cache, &params)?;
            if !grads.is_finite() {
                return Err(Error::NonFinite { op: "train_run" });
            }
            params.bn.update_running(out.cache.bn_cache())?;
            optimizer_step(&mut params, &grads.blocks(), &mut state, lr)?;
            ce += out.ce_loss;
            tri += out.triplet_loss;
            tot += out.total_loss;
        }
        let n = iters as f64;
        let due = eval.is_some()
            && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.schedule.total_epochs);
        let report = match (&eval, due) {
            (Some(e), true) => Some(e.evaluate(&params, cfg.eval_metric)?),
            _ => None,
        };
        history.push(EpochRecord {
            epoch,
            lr,
            ce_loss: ce / n,
            triplet_loss: tri / n,
            total_loss: tot / n,
            map: report.as_ref().map(|r| r.map),
            rank1: report.as_ref().map(|r| r.rank(1)),
        });
    }
    Ok(TrainOutcome { params, history })
}
