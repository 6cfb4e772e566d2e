//! Channel-stacked temporal inputs.
//!
//! Every stacked input starts with the target frame `I_t` in channels 0..3,
//! followed by past frames (RGB variants) or inter-frame difference images
//! (Diff variants), newest first.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};
use crate::tensor::{frame_index_from_path, read_ppm, write_tensor, ImageFrame, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// `{I_t, I_(t-1), ..., I_(t-N+1)}`
    RgbSeq,
    /// `{I_t, I_(t-Δ)}`
    RgbInt,
    /// `{I_t, d_(t-1,1), ..., d_(t-N+1,1)}`
    DiffSeq,
    /// `{I_t, d_(t-Δ,Δ)}`
    DiffInt,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::RgbSeq, Variant::RgbInt, Variant::DiffSeq, Variant::DiffInt];

    pub fn name(self) -> &'static str {
        match self {
            Variant::RgbSeq => "rgb-seq",
            Variant::RgbInt => "rgb-int",
            Variant::DiffSeq => "diff-seq",
            Variant::DiffInt => "diff-int",
        }
    }

    pub fn is_sequential(self) -> bool {
        matches!(self, Variant::RgbSeq | Variant::DiffSeq)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

/// One of the four input configurations with its frame count or interval.
///
/// Sequential variants use `n` with `delta == 1`; interval variants use
/// `delta` with `n == 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputConfig {
    pub variant: Variant,
    pub n: usize,
    pub delta: usize,
}

impl InputConfig {
    pub fn new(variant: Variant, n: usize, delta: usize) -> Result<Self> {
        let config = if variant.is_sequential() {
            InputConfig { variant, n, delta: 1 }
        } else {
            InputConfig { variant, n: 2, delta }
        };
        if config.n == 0 || config.delta == 0 {
            return Err(Error::InvalidArgument(format!(
                "{}: frame count and interval must be at least 1",
                variant.name()
            )));
        }
        Ok(config)
    }

    pub fn rgb_seq(n: usize) -> Result<Self> {
        Self::new(Variant::RgbSeq, n, 1)
    }

    pub fn rgb_int(delta: usize) -> Result<Self> {
        Self::new(Variant::RgbInt, 2, delta)
    }

    pub fn diff_seq(n: usize) -> Result<Self> {
        Self::new(Variant::DiffSeq, n, 1)
    }

    pub fn diff_int(delta: usize) -> Result<Self> {
        Self::new(Variant::DiffInt, 2, delta)
    }

    /// Number of stacked channels.
    pub fn channels(&self) -> usize {
        3 * self.n
    }

    /// True when the parameters fall outside the evaluated ranges
    /// (`n` in 1..=10, `delta` in 1..=5).
    pub fn outside_evaluated_range(&self) -> bool {
        !(1..=10).contains(&self.n) || !(1..=5).contains(&self.delta)
    }

    /// The `(later, earlier)` past-frame offsets of each block after the
    /// target frame. RGB blocks have `later == earlier`.
    fn blocks(&self) -> Vec<(u64, u64)> {
        let (n, d) = (self.n as u64, self.delta as u64);
        match self.variant {
            Variant::RgbSeq => (1..n).map(|k| (k, k)).collect(),
            Variant::RgbInt => vec![(d, d)],
            // d_(t-k,1) compares I_(t-k+1) against I_(t-k)
            Variant::DiffSeq => (1..n).map(|k| (k - 1, k)).collect(),
            Variant::DiffInt => vec![(0, d)],
        }
    }
}

/// An ordered frame sequence with uniform dimensions.
#[derive(Debug, Clone, Default)]
pub struct FrameSource {
    frames: Vec<ImageFrame>,
}

impl FrameSource {
    pub fn new(frames: Vec<ImageFrame>) -> Result<Self> {
        for pair in frames.windows(2) {
            if pair[1].frame_index <= pair[0].frame_index {
                return Err(Error::Validation(format!(
                    "frame indices must be strictly increasing ({} then {})",
                    pair[0].frame_index, pair[1].frame_index
                )));
            }
            if !pair[0].same_size(&pair[1]) {
                return Err(Error::DimensionMismatch(format!(
                    "frame {} is {}x{} but frame {} is {}x{}",
                    pair[0].frame_index,
                    pair[0].width,
                    pair[0].height,
                    pair[1].frame_index,
                    pair[1].width,
                    pair[1].height
                )));
            }
        }
        Ok(FrameSource { frames })
    }

    /// Loads every `*.ppm` file in `dir`, ordered by frame number.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths = Vec::new();
        for entry in fs::read_dir(dir).in_file(dir)? {
            let path = entry.in_file(dir)?.path();
            if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) {
                paths.push(path);
            }
        }
        let mut frames = paths.par_iter().map(read_ppm).collect::<Result<Vec<_>>>()?;
        frames.sort_by_key(|f| f.frame_index);
        Self::new(frames).in_file(dir)
    }

    pub fn frames(&self) -> &[ImageFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn get(&self, index: u64) -> Option<&ImageFrame> {
        self.frames.binary_search_by_key(&index, |f| f.frame_index).ok().map(|i| &self.frames[i])
    }

    /// The newest frame at or before `index`, or the earliest frame when
    /// `index` precedes the whole sequence.
    fn at_or_before(&self, index: i64) -> &ImageFrame {
        let pos = self.frames.partition_point(|f| (f.frame_index as i64) <= index);
        &self.frames[pos.saturating_sub(1)]
    }
}

/// Per-channel `floor((later - earlier + 255) / 2)`.
pub fn diff_image(later: &ImageFrame, earlier: &ImageFrame) -> Result<Tensor> {
    if !later.same_size(earlier) {
        return Err(Error::DimensionMismatch(format!(
            "cannot difference {}x{} against {}x{}",
            later.width, later.height, earlier.width, earlier.height
        )));
    }
    let plane = later.width * later.height;
    let mut data = vec![0u8; 3 * plane];
    for (i, (a, b)) in later.pixels.chunks_exact(3).zip(earlier.pixels.chunks_exact(3)).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = diff_value(a[c], b[c]);
        }
    }
    Tensor::from_u8(vec![3, later.height, later.width], data)
}

#[inline]
pub fn diff_value(later: u8, earlier: u8) -> u8 {
    ((later as i32 - earlier as i32 + 255) / 2) as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackedInput {
    pub tensor: Tensor,
    pub target_frame_index: u64,
    pub config: InputConfig,
}

/// Builds the stacked input for target frame `t`.
///
/// Past frame indices before the start of the sequence clamp to the earliest
/// frame; indices falling in a gap resolve to the newest frame before them.
pub fn build_input(source: &FrameSource, t: u64, config: &InputConfig) -> Result<StackedInput> {
    let target = source
        .get(t)
        .ok_or_else(|| Error::InvalidArgument(format!("frame {t} is not in the source")))?;
    let plane = 3 * target.width * target.height;
    let mut data = Vec::with_capacity(config.channels() * plane);
    data.extend_from_slice(target.to_planar().as_u8()?);
    for (later, earlier) in config.blocks() {
        let earlier_frame = source.at_or_before(t as i64 - earlier as i64);
        if later == earlier {
            data.extend_from_slice(earlier_frame.to_planar().as_u8()?);
        } else {
            let later_frame = source.at_or_before(t as i64 - later as i64);
            data.extend_from_slice(diff_image(later_frame, earlier_frame)?.as_u8()?);
        }
    }
    let tensor = Tensor::from_u8(vec![config.channels(), target.height, target.width], data)?;
    Ok(StackedInput { tensor, target_frame_index: t, config: *config })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestConfig {
    pub variant: Variant,
    pub n: usize,
    pub delta: usize,
    pub channels: usize,
    pub outside_evaluated_range: bool,
    /// How past frames before the first available frame are resolved.
    pub sequence_start: String,
}

impl From<&InputConfig> for ManifestConfig {
    fn from(c: &InputConfig) -> Self {
        ManifestConfig {
            variant: c.variant,
            n: c.n,
            delta: c.delta,
            channels: c.channels(),
            outside_evaluated_range: c.outside_evaluated_range(),
            sequence_start: "clamp-to-earliest".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub index: u64,
    pub tensor: String,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ManifestConfig,
    pub items: Vec<ManifestItem>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Label files keyed by the frame number in their stem.
fn index_labels(dir: &Path) -> Result<BTreeMap<u64, PathBuf>> {
    let mut labels = BTreeMap::new();
    for entry in fs::read_dir(dir).in_file(dir)? {
        let path = entry.in_file(dir)?.path();
        if !path.is_file() {
            continue;
        }
        let Ok(index) = frame_index_from_path(&path) else { continue };
        if let Some(previous) = labels.insert(index, path.clone()) {
            return Err(Error::Validation(format!(
                "labels {} and {} both map to frame {index}",
                previous.display(),
                path.display()
            ))
            .in_file(dir));
        }
    }
    Ok(labels)
}

/// Writes `stack_<index>.mten` for every frame plus `manifest.json`.
///
/// Label files, when given, are matched to frames by the trailing number of
/// their stem and copied verbatim as `label_<index>.<ext>`.
pub fn build_dataset(
    source: &FrameSource,
    config: &InputConfig,
    out_dir: impl AsRef<Path>,
    labels_dir: Option<&Path>,
) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    let labels = labels_dir.map(index_labels).transpose()?;
    if let (Some(labels), Some(dir)) = (&labels, labels_dir) {
        if let Some(f) = source.frames().iter().find(|f| !labels.contains_key(&f.frame_index)) {
            return Err(Error::Validation(format!("no label file for frame {}", f.frame_index)).in_file(dir));
        }
    }
    fs::create_dir_all(out_dir).in_file(out_dir)?;

    let items = source
        .frames()
        .par_iter()
        .map(|frame| {
            let index = frame.frame_index;
            let stacked = build_input(source, index, config)?;
            let tensor_name = format!("stack_{index}.mten");
            write_tensor(&stacked.tensor, out_dir.join(&tensor_name))?;
            let label = match &labels {
                Some(labels) => {
                    let src = &labels[&index];
                    let name = match src.extension().and_then(|e| e.to_str()) {
                        Some(ext) => format!("label_{index}.{ext}"),
                        None => format!("label_{index}"),
                    };
                    fs::copy(src, out_dir.join(&name)).in_file(src)?;
                    Some(name)
                }
                None => None,
            };
            Ok(ManifestItem { index, tensor: tensor_name, label })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = Manifest { config: config.into(), items };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").in_file(&path)?;
    Ok(manifest)
}
