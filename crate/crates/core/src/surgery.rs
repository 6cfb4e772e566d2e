//! First-layer weight surgery for channel-stacked inputs.
//!
//! A pre-trained stem expects 3 input channels. Stacking `n` frames gives
//! `3n`, so the first convolution has to be widened. Two transforms are
//! provided:
//!
//! * [`replicate_init`] tiles the filters `n` times along the input-channel
//!   axis and scales them by `1/n`. On a static stack (the same frame `n`
//!   times) the widened layer reproduces the original layer's output.
//! * [`random_init_first_layer`] draws a fresh layer from a fan-in bounded
//!   uniform law.
//!
//! [`conv2d_reference`] is a direct cross-correlation used to check the
//! transforms.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};
use crate::tensor::{read_tensor, write_tensor, Tensor};

/// Weights of a 2-d convolution laid out `[c_out, c_in, kh, kw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerWeights {
    pub c_out: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

/// Sidecar describing a weight file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightsMeta {
    pub c_out: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub bias: bool,
}

impl ConvLayerWeights {
    pub fn new(
        c_out: usize,
        c_in: usize,
        kh: usize,
        kw: usize,
        weight: Vec<f32>,
        bias: Option<Vec<f32>>,
    ) -> Result<Self> {
        if c_out == 0 || c_in == 0 || kh == 0 || kw == 0 {
            return Err(Error::InvalidArgument(format!(
                "convolution dims must be positive, got [{c_out}, {c_in}, {kh}, {kw}]"
            )));
        }
        if weight.len() != c_out * c_in * kh * kw {
            return Err(Error::DimensionMismatch(format!(
                "weight buffer has {} values, shape [{c_out}, {c_in}, {kh}, {kw}] needs {}",
                weight.len(),
                c_out * c_in * kh * kw
            )));
        }
        if let Some(b) = &bias {
            if b.len() != c_out {
                return Err(Error::DimensionMismatch(format!("bias has {} values for {c_out} filters", b.len())));
            }
        }
        Ok(ConvLayerWeights { c_out, c_in, kh, kw, weight, bias })
    }

    pub fn from_tensors(weight: &Tensor, bias: Option<&Tensor>) -> Result<Self> {
        let &[c_out, c_in, kh, kw] = weight.shape() else {
            return Err(Error::DimensionMismatch(format!(
                "convolution weights must be 4-d, got shape {:?}",
                weight.shape()
            )));
        };
        let bias = bias.map(|b| b.as_f32().map(<[f32]>::to_vec)).transpose()?;
        Self::new(c_out, c_in, kh, kw, weight.as_f32()?.to_vec(), bias)
    }

    pub fn weight_tensor(&self) -> Tensor {
        Tensor::from_f32(vec![self.c_out, self.c_in, self.kh, self.kw], self.weight.clone())
            .expect("validated on construction")
    }

    pub fn bias_tensor(&self) -> Option<Tensor> {
        self.bias.as_ref().map(|b| Tensor::from_f32(vec![self.c_out], b.clone()).expect("validated"))
    }

    pub fn meta(&self) -> WeightsMeta {
        WeightsMeta { c_out: self.c_out, c_in: self.c_in, kh: self.kh, kw: self.kw, bias: self.bias.is_some() }
    }

    #[inline]
    fn at(&self, o: usize, c: usize, y: usize, x: usize) -> f32 {
        self.weight[((o * self.c_in + c) * self.kh + y) * self.kw + x]
    }
}

/// Paths of the sidecar and bias files that accompany `weights.mten`.
pub fn companion_paths(weights: &Path) -> (PathBuf, PathBuf) {
    let stem = weights.file_stem().and_then(|s| s.to_str()).unwrap_or("weights");
    (weights.with_file_name(format!("{stem}.json")), weights.with_file_name(format!("{stem}.bias.mten")))
}

/// Loads weights written by [`save_weights`]. The JSON sidecar is optional;
/// without it the shape comes from the tensor and a bias is loaded when
/// `<stem>.bias.mten` exists.
pub fn load_weights(path: impl AsRef<Path>) -> Result<ConvLayerWeights> {
    let path = path.as_ref();
    let (meta_path, bias_path) = companion_paths(path);
    let weight = read_tensor(path)?;
    let meta: Option<WeightsMeta> = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).in_file(&meta_path)?;
        Some(serde_json::from_str(&text).in_file(&meta_path)?)
    } else {
        None
    };
    let has_bias = meta.as_ref().map_or_else(|| bias_path.exists(), |m| m.bias);
    let bias = if has_bias { Some(read_tensor(&bias_path)?) } else { None };
    let layer = ConvLayerWeights::from_tensors(&weight, bias.as_ref()).in_file(path)?;
    if let Some(meta) = meta {
        if meta != layer.meta() {
            return Err(Error::Validation(format!("sidecar {meta:?} disagrees with tensor shape")).in_file(&meta_path));
        }
    }
    Ok(layer)
}

pub fn save_weights(layer: &ConvLayerWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (meta_path, bias_path) = companion_paths(path);
    write_tensor(&layer.weight_tensor(), path)?;
    if let Some(bias) = layer.bias_tensor() {
        write_tensor(&bias, &bias_path)?;
    }
    let text = serde_json::to_string(&layer.meta())?;
    fs::write(&meta_path, text + "\n").in_file(&meta_path)
}

/// Tiles the input-channel axis `n` times, scaling every copy by `1/n`.
pub fn replicate_init(w: &ConvLayerWeights, n: usize) -> Result<ConvLayerWeights> {
    if n < 1 {
        return Err(Error::InvalidArgument("replication count must be at least 1".into()));
    }
    let scale = 1.0f32 / n as f32;
    let block = w.c_in * w.kh * w.kw;
    let mut weight = Vec::with_capacity(w.weight.len() * n);
    for filter in w.weight.chunks_exact(block) {
        for _ in 0..n {
            weight.extend(filter.iter().map(|&v| v * scale));
        }
    }
    ConvLayerWeights::new(w.c_out, w.c_in * n, w.kh, w.kw, weight, w.bias.clone())
}

/// A fresh layer with weights uniform on `[-b, b]`, `b = 1/sqrt(c_in*kh*kw)`,
/// and zero bias.
pub fn random_init_first_layer(c_out: usize, c_in: usize, kh: usize, kw: usize, seed: u64) -> Result<ConvLayerWeights> {
    let count = c_out * c_in * kh * kw;
    if count == 0 {
        return Err(Error::InvalidArgument("convolution dims must be positive".into()));
    }
    let bound = 1.0 / ((c_in * kh * kw) as f32).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weight = (0..count).map(|_| rng.random_range(-bound..=bound)).collect();
    ConvLayerWeights::new(c_out, c_in, kh, kw, weight, Some(vec![0.0; c_out]))
}

/// Concatenates `n` copies of a `[C, H, W]` tensor along the channel axis.
pub fn stack_copies(input: &Tensor, n: usize) -> Result<Tensor> {
    let mut shape = input.shape().to_vec();
    shape[0] *= n;
    let data = input.as_f32()?.repeat(n);
    Tensor::from_f32(shape, data)
}

/// Direct cross-correlation with zero padding.
///
/// Accumulates each output pixel in `f64` in a fixed (channel, row, column)
/// order, so results do not depend on how output channels are scheduled.
pub fn conv2d_reference(input: &Tensor, w: &ConvLayerWeights, stride: usize, pad: usize) -> Result<Tensor> {
    let &[c, h, wd] = input.shape() else {
        return Err(Error::DimensionMismatch(format!("input must be [C, H, W], got {:?}", input.shape())));
    };
    if c != w.c_in {
        return Err(Error::DimensionMismatch(format!("input has {c} channels, weights expect {}", w.c_in)));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
    if w.kh > ph || w.kw > pw {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} kernel exceeds padded {ph}x{pw} input",
            w.kh, w.kw
        )));
    }
    let oh = (ph - w.kh) / stride + 1;
    let ow = (pw - w.kw) / stride + 1;
    let x = input.as_f32()?;

    let out: Vec<f32> = (0..w.c_out)
        .into_par_iter()
        .flat_map_iter(|o| {
            let bias = w.bias.as_ref().map_or(0.0, |b| b[o] as f64);
            (0..oh * ow).map(move |p| {
                let (oy, ox) = (p / ow, p % ow);
                let mut acc = 0.0f64;
                for ci in 0..c {
                    for ky in 0..w.kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..w.kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let v = x[(ci * h + iy as usize) * wd + ix as usize];
                            acc += w.at(o, ci, ky, kx) as f64 * v as f64;
                        }
                    }
                }
                (acc + bias) as f32
            })
        })
        .collect();
    Tensor::from_f32(vec![w.c_out, oh, ow], out)
}
