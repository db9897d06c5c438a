//! Datasets: synthetic identity clusters with a radial-norm confound, the
//! CSV manifest format, and the two image augmentations used in training.
//!
//! # On-disk layout
//!
//! A manifest is a CSV file with the header `path,pid,camid,split`. `path`
//! is relative to the manifest's directory; `split` is one of `train`,
//! `query`, `gallery`. Payload files ending in `.f64` hold a feature vector:
//!
//! ```text
//! bytes 0..8     number of values N, u64 little-endian
//! bytes 8..8+8N  N IEEE-754 binary64 values, little-endian
//! ```
//!
//! Any other extension is decoded as an 8-bit image (PNG, JPEG, BMP);
//! grayscale images give one channel, everything else is converted to RGB,
//! and values are scaled to `[0, 1]`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm, Mat, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(format!("unknown split tag {other:?} (expected train, query or gallery)")),
        }
    }
}

/// `height x width x channels` image, values stored row-major in HWC order.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "Image::new",
                format!("{} values for {height}x{width}x{channels}", data.len()),
            ));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    fn offset(&self, y: usize, x: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let o = self.offset(y, x);
        &self.data[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let o = self.offset(y, x);
        &mut self.data[o..o + self.channels]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Vector(Vec<f64>),
    Image(Image),
}

impl Payload {
    /// Flattened values as the MLP backbone consumes them.
    pub fn values(&self) -> &[f64] {
        match self {
            Payload::Vector(v) => v,
            Payload::Image(img) => &img.data,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub payload: Payload,
    pub pid: i64,
    pub camid: i64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    items: Vec<Item>,
    /// Original train-split pid -> dense label in `0..num_train_ids`.
    pid_map: BTreeMap<i64, usize>,
}

impl Dataset {
    pub fn new(items: Vec<Item>) -> Self {
        let mut pid_map = BTreeMap::new();
        for it in items.iter().filter(|it| it.split == Split::Train) {
            pid_map.entry(it.pid).or_insert(0);
        }
        for (label, v) in pid_map.values_mut().enumerate() {
            *v = label;
        }
        Self { items, pid_map }
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn pid_map(&self) -> &BTreeMap<i64, usize> {
        &self.pid_map
    }

    pub fn num_train_ids(&self) -> usize {
        self.pid_map.len()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.items.len()).filter(|&i| self.items[i].split == split).collect()
    }

    /// Dense labels for the given items; every item must belong to the train split.
    pub fn train_labels(&self, indices: &[usize]) -> Result<Vec<usize>> {
        indices
            .iter()
            .map(|&i| {
                let it = &self.items[i];
                self.pid_map
                    .get(&it.pid)
                    .copied()
                    .filter(|_| it.split == Split::Train)
                    .ok_or_else(|| Error::Dataset(format!("item {i} is not in the train split")))
            })
            .collect()
    }

    pub fn pids(&self, indices: &[usize]) -> Vec<i64> {
        indices.iter().map(|&i| self.items[i].pid).collect()
    }

    pub fn camids(&self, indices: &[usize]) -> Vec<i64> {
        indices.iter().map(|&i| self.items[i].camid).collect()
    }

    /// Flattened payload length shared by all items.
    pub fn input_dim(&self) -> Result<usize> {
        let dim = self
            .items
            .first()
            .map(|it| it.payload.values().len())
            .ok_or_else(|| Error::Dataset("empty dataset".into()))?;
        if let Some(i) = self.items.iter().position(|it| it.payload.values().len() != dim) {
            return Err(Error::Dataset(format!(
                "item {i} has {} values, item 0 has {dim}",
                self.items[i].payload.values().len()
            )));
        }
        Ok(dim)
    }

    /// Stacks the flattened payloads of `indices` into a matrix.
    pub fn features(&self, indices: &[usize]) -> Result<Mat> {
        let rows: Vec<&[f64]> = indices.iter().map(|&i| self.items[i].payload.values()).collect();
        Mat::from_rows(&rows).map_err(|_| Error::Dataset("payloads differ in length".into()))
    }

    /// Per-channel mean over all image payloads in the train split.
    pub fn channel_means(&self) -> Option<Vec<f64>> {
        let mut sums: Option<Vec<f64>> = None;
        let mut count = 0usize;
        for it in self.items.iter().filter(|it| it.split == Split::Train) {
            if let Payload::Image(img) = &it.payload {
                let s = sums.get_or_insert_with(|| vec![0.0; img.channels]);
                if s.len() != img.channels {
                    return None;
                }
                for px in img.data.chunks_exact(img.channels) {
                    for (a, v) in s.iter_mut().zip(px) {
                        *a += v;
                    }
                }
                count += img.height * img.width;
            }
        }
        sums.map(|s| s.into_iter().map(|v| v / count.max(1) as f64).collect())
    }

    pub fn write_pid_map(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(["pid", "label"]).map_err(|e| csv_io(path, e))?;
        for (pid, label) in &self.pid_map {
            w.write_record([pid.to_string(), label.to_string()])
                .map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Parameters of the synthetic identity-cluster generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_ids: usize,
    pub samples_per_id: usize,
    pub dim: usize,
    /// Scale of the isotropic perturbation added to an identity's direction.
    pub direction_noise: f64,
    /// Radial scales are drawn uniformly from `[0.5, 0.5 + norm_confound]`.
    pub norm_confound: f64,
    /// Spread of identity directions around a shared population direction.
    pub inter_id_separation: f64,
    pub cameras: usize,
    /// Identities `0..num_train_ids` form the train split; the rest are held out.
    pub num_train_ids: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_ids: 64,
            samples_per_id: 16,
            dim: 32,
            direction_noise: 0.5,
            norm_confound: 2.5,
            inter_id_separation: 2.0,
            cameras: 4,
            num_train_ids: 32,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub const MIN_RADIUS: f64 = 0.5;

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Parameter(format!("synthetic dim must be >= 2, got {}", self.dim)));
        }
        if self.num_ids < 2 || self.samples_per_id < 2 {
            return Err(Error::Parameter("need num_ids >= 2 and samples_per_id >= 2".into()));
        }
        if self.cameras == 0 {
            return Err(Error::Parameter("need at least one camera".into()));
        }
        if self.num_train_ids > self.num_ids {
            return Err(Error::Parameter(format!(
                "num_train_ids {} exceeds num_ids {}",
                self.num_train_ids, self.num_ids
            )));
        }
        for (name, v) in [
            ("direction_noise", self.direction_noise),
            ("norm_confound", self.norm_confound),
            ("inter_id_separation", self.inter_id_separation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn unit(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Identity clusters on the sphere, each sample rescaled by a random radius.
///
/// Identity `k` gets direction `u_k = unit(m + s·z_k/√d)` around a shared
/// unit vector `m`; a sample is `r · unit(u_k + σ·e/√d)` with
/// `r ~ U[0.5, 0.5 + norm_confound]`. Sample `j` of an identity is seen by
/// camera `j mod cameras`. Held-out identities contribute one query per
/// (identity, camera) pair (its first sample); the rest go to the gallery.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let d = cfg.dim;
    let sd = (d as f64).sqrt();
    let mut shared: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    unit(&mut shared);

    let mut items = Vec::with_capacity(cfg.num_ids * cfg.samples_per_id);
    for id in 0..cfg.num_ids {
        let mut dir: Vec<f64> = shared
            .iter()
            .map(|m| m + cfg.inter_id_separation * rng.normal() / sd)
            .collect();
        unit(&mut dir);
        let held_out = id >= cfg.num_train_ids;
        let mut seen_cams = vec![false; cfg.cameras];
        for j in 0..cfg.samples_per_id {
            let mut v: Vec<f64> = dir
                .iter()
                .map(|u| u + cfg.direction_noise * rng.normal() / sd)
                .collect();
            unit(&mut v);
            let r = SynthConfig::MIN_RADIUS + cfg.norm_confound * rng.uniform();
            v.iter_mut().for_each(|x| *x *= r);
            let cam = j % cfg.cameras;
            let split = if !held_out {
                Split::Train
            } else if !seen_cams[cam] {
                seen_cams[cam] = true;
                Split::Query
            } else {
                Split::Gallery
            };
            items.push(Item {
                payload: Payload::Vector(v),
                pid: id as i64,
                camid: cam as i64,
                split,
            });
        }
    }
    Ok(Dataset::new(items))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("{other:?}"),
        },
    }
}

pub fn read_vector(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg,
    };
    if bytes.len() < 8 {
        return Err(parse_err("vector file shorter than its 8-byte header".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8-byte slice")) as usize;
    let body = &bytes[8..];
    if body.len() != n.saturating_mul(8) {
        return Err(parse_err(format!(
            "header declares {n} values but body holds {} bytes",
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn write_vector(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + 8 * values.len());
    bytes.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img {
        image::DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
        other => (3, other.to_rgb8().into_raw()),
    };
    Image::new(h, w, channels, raw.into_iter().map(|b| b as f64 / 255.0).collect())
}

fn write_image(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let (w, h) = (img.width as u32, img.height as u32);
    let color = match img.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => {
            return Err(Error::Parameter(format!(
                "only 1- or 3-channel images can be written, got {c}"
            )))
        }
    };
    image::save_buffer(path, &bytes, w, h, color).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a manifest and every payload it references.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let parse = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let headers = reader.headers().map_err(|e| parse(1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "pid", "camid", "split"] {
        return Err(parse(1, format!("expected header path,pid,camid,split, found {}", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut items = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let rel = field(0);
        if rel.is_empty() {
            return Err(parse(line, "empty path".into()));
        }
        let pid: i64 = field(1)
            .parse()
            .map_err(|_| parse(line, format!("invalid pid {:?}", field(1))))?;
        let camid: i64 = field(2)
            .parse()
            .map_err(|_| parse(line, format!("invalid camid {:?}", field(2))))?;
        let split: Split = field(3).parse().map_err(|m| parse(line, m))?;
        let full = base.join(rel);
        if !full.exists() {
            return Err(parse(line, format!("payload {} does not exist", full.display())));
        }
        let payload = if full.extension().is_some_and(|e| e == "f64") {
            Payload::Vector(read_vector(&full)?)
        } else {
            Payload::Image(read_image(&full)?)
        };
        items.push(Item { payload, pid, camid, split });
    }
    Ok(Dataset::new(items))
}

/// Writes `manifest.csv` plus one payload file per item under `dir` and
/// returns the manifest path. Images are quantized to 8 bits.
pub fn write_manifest(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let payload_dir = dir.join("payloads");
    fs::create_dir_all(&payload_dir).map_err(|e| Error::io(&payload_dir, e))?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| csv_io(&manifest, e))?;
    w.write_record(["path", "pid", "camid", "split"])
        .map_err(|e| csv_io(&manifest, e))?;
    for (i, it) in dataset.items.iter().enumerate() {
        let rel = match &it.payload {
            Payload::Vector(v) => {
                let rel = format!("payloads/{i:06}.f64");
                write_vector(&dir.join(&rel), v)?;
                rel
            }
            Payload::Image(img) => {
                let rel = format!("payloads/{i:06}.png");
                write_image(&dir.join(&rel), img)?;
                rel
            }
        };
        w.write_record([rel, it.pid.to_string(), it.camid.to_string(), it.split.to_string()])
            .map_err(|e| csv_io(&manifest, e))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EraseFill {
    /// Per-channel constant, usually the dataset mean.
    Mean { values: Vec<f64> },
    /// Independent uniform values in `[low, high)` per pixel and channel.
    UniformNoise { low: f64, high: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErasingConfig {
    pub probability: f64,
    /// Erased area as a fraction of the image, `(lo, hi)`.
    pub area_range: (f64, f64),
    /// Height / width of the erased rectangle, sampled log-uniformly.
    pub aspect_range: (f64, f64),
    pub fill: EraseFill,
}

impl ErasingConfig {
    pub const MAX_ATTEMPTS: usize = 100;

    pub fn with_mean(values: Vec<f64>) -> Self {
        Self {
            probability: 0.5,
            area_range: (0.02, 0.4),
            aspect_range: (0.3, 3.33),
            fill: EraseFill::Mean { values },
        }
    }

    fn validate(&self, channels: usize) -> Result<()> {
        let (alo, ahi) = self.area_range;
        let (rlo, rhi) = self.aspect_range;
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Parameter(format!("erasing probability {} outside [0, 1]", self.probability)));
        }
        if !(alo > 0.0 && alo <= ahi && ahi <= 1.0) {
            return Err(Error::Parameter(format!("invalid area range ({alo}, {ahi})")));
        }
        if !(rlo > 0.0 && rlo <= rhi && rhi.is_finite()) {
            return Err(Error::Parameter(format!("invalid aspect range ({rlo}, {rhi})")));
        }
        match &self.fill {
            EraseFill::Mean { values } if values.len() != channels => Err(Error::Parameter(format!(
                "fill has {} channels, image has {channels}",
                values.len()
            ))),
            EraseFill::UniformNoise { low, high } if !(low <= high) => {
                Err(Error::Parameter(format!("invalid noise range ({low}, {high})")))
            }
            _ => Ok(()),
        }
    }
}

/// With probability `p`, overwrites one random rectangle. Rectangles are
/// rejection-sampled; after [`ErasingConfig::MAX_ATTEMPTS`] misses the image
/// is returned unchanged.
pub fn random_erasing(img: &Image, cfg: &ErasingConfig, rng: &mut Rng) -> Result<Image> {
    cfg.validate(img.channels)?;
    let mut out = img.clone();
    if !rng.bernoulli(cfg.probability) {
        return Ok(out);
    }
    let area = (img.height * img.width) as f64;
    let (llo, lhi) = (cfg.aspect_range.0.ln(), cfg.aspect_range.1.ln());
    for _ in 0..ErasingConfig::MAX_ATTEMPTS {
        let target = area * rng.uniform_range(cfg.area_range.0, cfg.area_range.1);
        let aspect = rng.uniform_range(llo, lhi).exp();
        let h = (target * aspect).sqrt().round() as usize;
        let w = (target / aspect).sqrt().round() as usize;
        if h == 0 || w == 0 || h > img.height || w > img.width {
            continue;
        }
        let y0 = rng.below(img.height - h + 1);
        let x0 = rng.below(img.width - w + 1);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let px = out.pixel_mut(y, x);
                match &cfg.fill {
                    EraseFill::Mean { values } => px.copy_from_slice(values),
                    EraseFill::UniformNoise { low, high } => {
                        for v in px.iter_mut() {
                            *v = rng.uniform_range(*low, *high);
                        }
                    }
                }
            }
        }
        return Ok(out);
    }
    Ok(out)
}

/// With probability `p`, mirrors the image left-to-right.
pub fn horizontal_flip(img: &Image, p: f64, rng: &mut Rng) -> Image {
    let mut out = img.clone();
    if rng.bernoulli(p) {
        for y in 0..img.height {
            for x in 0..img.width {
                out.pixel_mut(y, x).copy_from_slice(img.pixel(y, img.width - 1 - x));
            }
        }
    }
    out
}
