//! RoIAlign pooling of appearance vectors from backbone feature maps.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::BBox;
use crate::tensor::Tensor;

pub const DEFAULT_OUTPUT_SIZE: usize = 7;
pub const DEFAULT_SAMPLING_RATIO: usize = 2;

/// A `[C, H, W]` feature map and its resolution relative to the image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    /// Feature pixels per image pixel (e.g. 1/16 for a stride-16 map).
    pub spatial_scale: f64,
}

impl FeatureMap {
    pub fn new(tensor: &Tensor, spatial_scale: f64) -> Result<Self> {
        let &[channels, height, width] = tensor.shape() else {
            return Err(Error::DimensionMismatch(format!(
                "feature map must be [C, H, W], got {:?}",
                tensor.shape()
            )));
        };
        if !(spatial_scale > 0.0 && spatial_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("spatial scale must be positive, got {spatial_scale}")));
        }
        Ok(FeatureMap { channels, height, width, data: tensor.as_f32()?.to_vec(), spatial_scale })
    }

    /// Builds a map by evaluating `f(c, y, x)` on every cell.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        spatial_scale: f64,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(&Tensor::from_f32(vec![channels, height, width], data)?, spatial_scale)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Bilinear interpolation with cell centres at integer coordinates.
/// Coordinates outside the map clamp to its border.
pub fn bilinear_sample(map: &FeatureMap, x: f64, y: f64) -> Vec<f32> {
    let mut out = vec![0.0; map.channels];
    bilinear_into(map, x, y, 1.0, &mut out);
    out.into_iter().map(|v| v as f32).collect()
}

/// Adds `weight * sample(x, y)` to `acc`.
fn bilinear_into(map: &FeatureMap, x: f64, y: f64, weight: f64, acc: &mut [f64]) {
    let x = x.clamp(0.0, (map.width - 1) as f64);
    let y = y.clamp(0.0, (map.height - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(map.width - 1), (y0 + 1).min(map.height - 1));
    let (lx, ly) = (x - x0 as f64, y - y0 as f64);
    let (hx, hy) = (1.0 - lx, 1.0 - ly);
    for (c, slot) in acc.iter_mut().enumerate() {
        let v = hy * (hx * map.at(c, y0, x0) as f64 + lx * map.at(c, y0, x1) as f64)
            + ly * (hx * map.at(c, y1, x0) as f64 + lx * map.at(c, y1, x1) as f64);
        *slot += weight * v;
    }
}

/// Pools the region under `bbox` (image coordinates) into a
/// `[C, out_h, out_w]` grid. Each bin averages `sampling_ratio²` bilinear
/// samples placed on a regular sub-grid; box corners are scaled and shifted
/// by half a feature pixel.
pub fn roi_align(map: &FeatureMap, bbox: &BBox, out_h: usize, out_w: usize, sampling_ratio: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 || sampling_ratio == 0 {
        return Err(Error::InvalidArgument("output size and sampling ratio must be at least 1".into()));
    }
    let s = map.spatial_scale;
    let (x1, y1) = (bbox.x1 * s - 0.5, bbox.y1 * s - 0.5);
    let (roi_w, roi_h) = ((bbox.x2 - bbox.x1) * s, (bbox.y2 - bbox.y1) * s);
    if !(roi_w > 0.0 && roi_h > 0.0) {
        return Err(Error::Validation(format!("box {:?} has no area at scale {s}", <[f64; 4]>::from(*bbox))));
    }
    let (bin_w, bin_h) = (roi_w / out_w as f64, roi_h / out_h as f64);
    let sr = sampling_ratio as f64;
    let weight = 1.0 / (sr * sr);

    let c = map.channels;
    let mut out = vec![0.0f32; c * out_h * out_w];
    let mut acc = vec![0.0f64; c];
    for ph in 0..out_h {
        for pw in 0..out_w {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for iy in 0..sampling_ratio {
                let y = y1 + ph as f64 * bin_h + (iy as f64 + 0.5) * bin_h / sr;
                for ix in 0..sampling_ratio {
                    let x = x1 + pw as f64 * bin_w + (ix as f64 + 0.5) * bin_w / sr;
                    bilinear_into(map, x, y, weight, &mut acc);
                }
            }
            for (ch, &v) in acc.iter().enumerate() {
                out[(ch * out_h + ph) * out_w + pw] = v as f32;
            }
        }
    }
    Tensor::from_f32(vec![c, out_h, out_w], out)
}

/// Spatial mean per channel of a `[C, H, W]` tensor.
pub fn pool_to_vector(aligned: &Tensor) -> Result<Vec<f32>> {
    let &[c, h, w] = aligned.shape() else {
        return Err(Error::DimensionMismatch(format!("expected [C, H, W], got {:?}", aligned.shape())));
    };
    let data = aligned.as_f32()?;
    Ok((0..c)
        .map(|ch| {
            let plane = &data[ch * h * w..(ch + 1) * h * w];
            (plane.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64) as f32
        })
        .collect())
}

/// One pooled appearance vector per box, as a `[num_boxes, C]` tensor.
pub fn extract_features(
    map: &FeatureMap,
    boxes: &[BBox],
    out_size: usize,
    sampling_ratio: usize,
) -> Result<Tensor> {
    if boxes.is_empty() {
        return Err(Error::Validation("no boxes to pool".into()));
    }
    let rows = boxes
        .par_iter()
        .map(|b| pool_to_vector(&roi_align(map, b, out_size, out_size, sampling_ratio)?))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_f32(vec![boxes.len(), map.channels], rows.concat())
}
