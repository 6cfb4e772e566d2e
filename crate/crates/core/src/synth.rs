//! Deterministic synthetic scenes: bouncing blobs, ground-truth boxes,
//! tracklets with injected ID switches and per-identity appearance vectors.
//!
//! Every random draw that depends on a frame comes from a ChaCha8 stream
//! keyed by `(seed, frame)`, so rendering in parallel cannot change output.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::FeatureMatrix;
use crate::error::{Error, Result, ResultExt};
use crate::metrics::{write_jsonl, BBox, Detection, GroundTruth};
use crate::tensor::{write_ppm, write_tensor, ImageFrame};
use crate::tracklets::{IdentityMap, Tracklet, TrackletSet};

pub const DEFAULT_FEATURE_DIM: usize = 32;

/// Stream offsets keep the per-frame feature and detection streams apart.
const FEATURE_STREAM: u64 = 1 << 32;
const PERTURB_STREAM: u64 = 2 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    #[default]
    Flat,
    /// 8-pixel checkerboard.
    Textured,
}

impl FromStr for Background {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Background::Flat),
            "textured" => Ok(Background::Textured),
            _ => Err(Error::InvalidArgument(format!("unknown background {s:?} (expected flat or textured)"))),
        }
    }
}

/// Object `object` receives a fresh tracking ID from `frame` onwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IdSwitch {
    pub object: usize,
    pub frame: u64,
}

impl FromStr for IdSwitch {
    type Err = Error;

    /// Parses `object:frame`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("id switch must be OBJECT:FRAME, got {s:?}"));
        let (o, f) = s.split_once(':').ok_or_else(bad)?;
        Ok(IdSwitch { object: o.trim().parse().map_err(|_| bad())?, frame: f.trim().parse().map_err(|_| bad())? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    pub num_objects: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Speed range in pixels per frame.
    pub speed_min: f64,
    pub speed_max: f64,
    pub id_switches: Vec<IdSwitch>,
    pub seed: u64,
    pub background: Background,
    pub feature_dim: usize,
    /// Per-coordinate standard deviation of the appearance noise.
    pub feature_noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 128,
            height: 96,
            num_frames: 100,
            num_objects: 4,
            radius_min: 5.0,
            radius_max: 10.0,
            speed_min: 0.5,
            speed_max: 3.0,
            id_switches: Vec::new(),
            seed: 0,
            background: Background::Flat,
            feature_dim: DEFAULT_FEATURE_DIM,
            feature_noise: 0.05,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::InvalidArgument(m));
        if self.width == 0 || self.height == 0 || self.num_frames == 0 || self.num_objects == 0 {
            return err("width, height, frame count and object count must be positive".into());
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max && self.radius_max.is_finite()) {
            return err(format!("invalid radius range {}..{}", self.radius_min, self.radius_max));
        }
        if 2.0 * self.radius_max > self.width.min(self.height) as f64 {
            return err(format!(
                "radius {} does not fit a {}x{} canvas",
                self.radius_max, self.width, self.height
            ));
        }
        if !(self.speed_min >= 0.0 && self.speed_min <= self.speed_max && self.speed_max.is_finite()) {
            return err(format!("invalid speed range {}..{}", self.speed_min, self.speed_max));
        }
        for s in &self.id_switches {
            if s.object >= self.num_objects {
                return err(format!("id switch names object {} of {}", s.object, self.num_objects));
            }
            if s.frame == 0 || s.frame >= self.num_frames as u64 {
                return err(format!("id switch frame {} outside 1..{}", s.frame, self.num_frames));
            }
        }
        if self.feature_dim == 0 {
            return err("feature dimension must be positive".into());
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return err(format!("invalid feature noise {}", self.feature_noise));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Blob {
    radius: f64,
    color: [u8; 3],
    /// Centre per frame.
    path: Vec<(f64, f64)>,
}

/// A generated scene held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub config: SceneConfig,
    blobs: Vec<Blob>,
    pub prototypes: Vec<Vec<f32>>,
    pub gt: Vec<GroundTruth>,
    pub tracklets: TrackletSet,
    pub identity_map: IdentityMap,
    /// One row per tracklet frame, ordered by tracklet ID then frame.
    pub features: FeatureMatrix,
}

fn bounce(pos: f64, vel: f64, lo: f64, hi: f64) -> (f64, f64) {
    let mut p = pos + vel;
    let mut v = vel;
    if p < lo {
        p = 2.0 * lo - p;
        v = -v;
    } else if p > hi {
        p = 2.0 * hi - p;
        v = -v;
    }
    (p.clamp(lo, hi), v)
}

fn frame_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Scene {
    pub fn generate(config: &SceneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (w, h) = (config.width as f64, config.height as f64);

        let blobs: Vec<Blob> = (0..config.num_objects)
            .map(|_| {
                let radius = rng.random_range(config.radius_min..=config.radius_max);
                let mut x = rng.random_range(radius..=w - radius);
                let mut y = rng.random_range(radius..=h - radius);
                let speed = rng.random_range(config.speed_min..=config.speed_max);
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let (mut vx, mut vy) = (speed * angle.cos(), speed * angle.sin());
                let color = [rng.random_range(96..=255), rng.random_range(96..=255), rng.random_range(96..=255)];
                let mut path = Vec::with_capacity(config.num_frames);
                for _ in 0..config.num_frames {
                    path.push((x, y));
                    (x, vx) = bounce(x, vx, radius, w - radius);
                    (y, vy) = bounce(y, vy, radius, h - radius);
                }
                Blob { radius, color, path }
            })
            .collect();

        let prototypes = draw_prototypes(&mut rng, config)?;

        let boxes: Vec<Vec<BBox>> = blobs
            .iter()
            .map(|b| {
                b.path
                    .iter()
                    .map(|&(x, y)| BBox::new(x - b.radius, y - b.radius, x + b.radius, y + b.radius))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let gt = (0..config.num_frames)
            .flat_map(|f| boxes.iter().map(move |b| GroundTruth { frame: f as u64, bbox: b[f], class_id: 0 }))
            .collect();

        // segments per object: (first id, then fresh ids in object order)
        let mut segments: Vec<(u64, usize, u64, u64)> = Vec::new();
        let mut next_id = config.num_objects as u64 + 1;
        let mut groups = Vec::with_capacity(config.num_objects);
        for object in 0..config.num_objects {
            let mut cuts: Vec<u64> =
                config.id_switches.iter().filter(|s| s.object == object).map(|s| s.frame).collect();
            cuts.sort_unstable();
            cuts.dedup();
            let mut starts = vec![0u64];
            starts.extend(cuts);
            let mut group = Vec::new();
            for (k, &start) in starts.iter().enumerate() {
                let end = starts.get(k + 1).map_or(config.num_frames as u64 - 1, |&s| s - 1);
                let id = if k == 0 {
                    object as u64 + 1
                } else {
                    next_id += 1;
                    next_id - 1
                };
                group.push(id);
                segments.push((id, object, start, end));
            }
            groups.push(group);
        }
        segments.sort_unstable();

        let noise = per_frame_noise(config);
        let mut rows = Vec::new();
        let mut tracklets = Vec::with_capacity(segments.len());
        for &(id, object, start, end) in &segments {
            let mut feature_rows = Vec::new();
            for f in start..=end {
                feature_rows.push(rows.len() / config.feature_dim);
                let n = &noise[f as usize][object];
                rows.extend(prototypes[object].iter().zip(n).map(|(p, e)| p + e));
            }
            let b = boxes[object][start as usize..=end as usize].to_vec();
            tracklets.push(Tracklet::new(id, start, end, b, Some(feature_rows))?);
        }
        let total = rows.len() / config.feature_dim;
        Ok(Scene {
            config: config.clone(),
            blobs,
            prototypes,
            gt,
            tracklets: TrackletSet::new(tracklets)?,
            identity_map: IdentityMap::new(groups)?,
            features: FeatureMatrix::new(total, config.feature_dim, rows)?,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.config.num_frames
    }

    /// Ground-truth box of `object` at `frame`.
    pub fn object_box(&self, object: usize, frame: u64) -> Option<BBox> {
        let b = self.blobs.get(object)?;
        let &(x, y) = b.path.get(frame as usize)?;
        BBox::new(x - b.radius, y - b.radius, x + b.radius, y + b.radius).ok()
    }

    fn background_at(&self, x: usize, y: usize) -> [u8; 3] {
        match self.config.background {
            Background::Flat => [40, 40, 40],
            Background::Textured => {
                if (x / 8 + y / 8).is_multiple_of(2) {
                    [60, 60, 60]
                } else {
                    [90, 90, 90]
                }
            }
        }
    }

    /// Filled circles over the background; later objects paint over earlier ones.
    pub fn render_frame(&self, frame: u64) -> Result<ImageFrame> {
        let f = frame as usize;
        if f >= self.config.num_frames {
            return Err(Error::InvalidArgument(format!("frame {frame} beyond {} frames", self.config.num_frames)));
        }
        let (w, h) = (self.config.width, self.config.height);
        let mut pixels = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let rgb = self
                    .blobs
                    .iter()
                    .rev()
                    .find(|b| {
                        let (cx, cy) = b.path[f];
                        (px - cx).powi(2) + (py - cy).powi(2) <= b.radius * b.radius
                    })
                    .map_or_else(|| self.background_at(x, y), |b| b.color);
                pixels.extend_from_slice(&rgb);
            }
        }
        ImageFrame::new(w, h, pixels, frame)
    }

    pub fn render_all(&self) -> Result<Vec<ImageFrame>> {
        (0..self.config.num_frames as u64).into_par_iter().map(|f| self.render_frame(f)).collect()
    }

    /// Writes `frames/frame_NNNN.ppm`, `gt.jsonl`, `tracklets.json`,
    /// `identity_map.json`, `features.mten` and `scene.json` into `out_dir`.
    pub fn write(&self, out_dir: impl AsRef<Path>) -> Result<()> {
        let out = out_dir.as_ref();
        let frames_dir = out.join("frames");
        fs::create_dir_all(&frames_dir).in_file(&frames_dir)?;
        (0..self.config.num_frames as u64).into_par_iter().try_for_each(|f| {
            write_ppm(&self.render_frame(f)?, frames_dir.join(format!("frame_{f:04}.ppm")))
        })?;
        write_jsonl(&self.gt, out.join("gt.jsonl"))?;
        self.tracklets.save(out.join("tracklets.json"))?;
        self.identity_map.save(out.join("identity_map.json"))?;
        write_tensor(&self.features.to_tensor(), out.join("features.mten"))?;
        let path = out.join("scene.json");
        fs::write(&path, serde_json::to_string_pretty(&self.config)? + "\n").in_file(&path)
    }
}

/// Gaussian prototypes, redrawn until every pair is at least `10σ` apart.
fn draw_prototypes(rng: &mut ChaCha8Rng, config: &SceneConfig) -> Result<Vec<Vec<f32>>> {
    let d = config.feature_dim;
    let min_sep = 10.0 * config.feature_noise;
    let spread = (2.0 * min_sep).max(1.0) / (2.0 * d as f64).sqrt();
    let normal = Normal::new(0.0, spread).expect("positive spread");
    for _ in 0..1000 {
        let protos: Vec<Vec<f32>> =
            (0..config.num_objects).map(|_| (0..d).map(|_| normal.sample(rng) as f32).collect()).collect();
        let ok = protos.iter().enumerate().all(|(i, a)| {
            protos[i + 1..].iter().all(|b| crate::embed::euclidean(a, b) >= min_sep)
        });
        if ok {
            return Ok(protos);
        }
    }
    Err(Error::InvalidArgument(format!(
        "could not place {} prototypes {min_sep} apart in {d} dimensions",
        config.num_objects
    )))
}

/// `noise[frame][object]`, each frame drawn from its own stream.
fn per_frame_noise(config: &SceneConfig) -> Vec<Vec<Vec<f32>>> {
    let sigma = config.feature_noise;
    (0..config.num_frames as u64)
        .into_par_iter()
        .map(|f| {
            let mut rng = frame_rng(config.seed, FEATURE_STREAM + f);
            (0..config.num_objects)
                .map(|_| {
                    (0..config.feature_dim)
                        .map(|_| if sigma > 0.0 { (sigma * rng.sample::<f64, _>(rand_distr::StandardNormal)) as f32 } else { 0.0 })
                        .collect()
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub drop_rate: f64,
    /// Each corner moves uniformly within `±jitter_px`.
    pub jitter_px: f64,
    /// Probability that a frame receives one false positive.
    pub fp_rate: f64,
    /// True detections score uniformly in `[score_min, 1]`; false positives
    /// score strictly below `score_min`.
    pub score_min: f64,
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig { drop_rate: 0.0, jitter_px: 0.0, fp_rate: 0.0, score_min: 1.0, seed: 0 }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("drop rate", self.drop_rate), ("fp rate", self.fp_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if !(self.jitter_px >= 0.0 && self.jitter_px.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid jitter {}", self.jitter_px)));
        }
        if !(self.score_min > 0.0 && self.score_min <= 1.0) {
            return Err(Error::InvalidArgument(format!("score_min must be in (0, 1], got {}", self.score_min)));
        }
        Ok(())
    }
}

fn jitter(v: f64, px: f64, rng: &mut ChaCha8Rng) -> f64 {
    if px > 0.0 {
        v + rng.random_range(-px..=px)
    } else {
        v
    }
}

/// Simulated detector output derived from ground truth on a
/// `width x height` canvas. Output is ordered by frame; within a frame,
/// surviving GT boxes come first in GT order, then the false positive.
pub fn perturb_detections(gt: &[GroundTruth], width: usize, height: usize, cfg: &PerturbConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let mut by_frame: BTreeMap<u64, Vec<&GroundTruth>> = BTreeMap::new();
    for g in gt {
        by_frame.entry(g.frame).or_default().push(g);
    }
    let (w, h) = (width.max(1) as f64, height.max(1) as f64);
    let mut out = Vec::new();
    for (&frame, boxes) in &by_frame {
        let mut rng = frame_rng(cfg.seed, PERTURB_STREAM + frame);
        for g in boxes {
            let drop = rng.random::<f64>() < cfg.drop_rate;
            let corners = [g.bbox.x1, g.bbox.y1, g.bbox.x2, g.bbox.y2].map(|v| jitter(v, cfg.jitter_px, &mut rng));
            let score = if cfg.score_min < 1.0 { rng.random_range(cfg.score_min..=1.0) } else { 1.0 };
            if drop {
                continue;
            }
            let (x1, x2) = ordered(corners[0], corners[2]);
            let (y1, y2) = ordered(corners[1], corners[3]);
            out.push(Detection { frame, bbox: BBox::new(x1, y1, x2, y2)?, score, class_id: g.class_id });
        }
        if rng.random::<f64>() < cfg.fp_rate {
            let bw = rng.random_range(2.0..=(w / 4.0).max(2.0));
            let bh = rng.random_range(2.0..=(h / 4.0).max(2.0));
            let x1 = rng.random_range(0.0..=(w - bw).max(0.0));
            let y1 = rng.random_range(0.0..=(h - bh).max(0.0));
            let score = cfg.score_min * rng.random_range(0.0..1.0);
            let class_id = boxes[0].class_id;
            out.push(Detection { frame, bbox: BBox::new(x1, y1, x1 + bw, y1 + bh)?, score, class_id });
        }
    }
    Ok(out)
}

fn ordered(a: f64, b: f64) -> (f64, f64) {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    if hi - lo < 1e-3 {
        (lo, lo + 1e-3)
    } else {
        (lo, hi)
    }
}
