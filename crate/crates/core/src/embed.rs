//! Tracklet-supervised metric learning.
//!
//! Appearance vectors are mapped to a 128-d embedding by a ReLU MLP trained
//! with a triplet hinge on squared Euclidean distances:
//!
//! ```text
//! loss = max(0, |a - p|² - |a - n|² + margin)
//! ```
//!
//! Positives come from the anchor's own tracklet; negatives from tracklets
//! with a different ID that share at least one frame with it. Two tracklets
//! visible at the same time cannot be the same individual, so these
//! negatives need no manual labels.
//!
//! Weights are stored as `f32`; activations, losses and gradients are
//! computed in `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};
use crate::tensor::{read_tensor, write_tensor, Tensor};
use crate::tracklets::{overlap_graph, temporal_overlap, TrackletSet};

pub const EMBED_DIM: usize = 128;
pub const DEFAULT_HIDDEN: [usize; 2] = [512, 256];
pub const DEFAULT_MARGIN: f64 = 1.0;
/// Centroid distance below which two tracklets are proposed as one
/// individual: half the separation a satisfied unit-margin triplet implies.
pub const DEFAULT_MERGE_THRESHOLD: f64 = 0.5;

/// A fully connected layer with row-major `[outputs, inputs]` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Layer {
    fn uniform(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f32).sqrt();
        let weight = (0..inputs * outputs).map(|_| rng.random_range(-bound..=bound)).collect();
        let bias = (0..outputs).map(|_| rng.random_range(-bound..=bound)).collect();
        Layer { inputs, outputs, weight, bias }
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, &b)| row.iter().zip(x).map(|(&w, &v)| w as f64 * v).sum::<f64>() + b as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingNet {
    layers: Vec<Layer>,
    /// L2-normalize the output embedding.
    pub normalize_output: bool,
}

/// Per-layer activations kept for backpropagation.
struct Trace {
    /// Input of each layer (post-ReLU for hidden layers).
    inputs: Vec<Vec<f64>>,
    /// Output layer pre-normalization.
    raw: Vec<f64>,
    out: Vec<f64>,
}

impl EmbeddingNet {
    /// `[d_in, 512, 256, 128]` with uniform fan-in initialization.
    pub fn new(d_in: usize, seed: u64) -> Result<Self> {
        Self::with_hidden(d_in, &DEFAULT_HIDDEN, seed)
    }

    pub fn with_hidden(d_in: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let dims: Vec<usize> = std::iter::once(d_in).chain(hidden.iter().copied()).chain([EMBED_DIM]).collect();
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("layer dims must be positive, got {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims.windows(2).map(|w| Layer::uniform(w[0], w[1], &mut rng)).collect();
        Ok(EmbeddingNet { layers, normalize_output: false })
    }

    pub fn from_layers(layers: Vec<Layer>, normalize_output: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.inputs == 0 || l.weight.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::DimensionMismatch(format!("layer {i} buffers do not match {}x{}", l.outputs, l.inputs)));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].outputs != w[1].inputs {
                return Err(Error::DimensionMismatch(format!(
                    "layer {i} emits {} values but layer {} takes {}",
                    w[0].outputs,
                    i + 1,
                    w[1].inputs
                )));
            }
        }
        let out = layers.last().unwrap().outputs;
        if out != EMBED_DIM {
            return Err(Error::DimensionMismatch(format!("embedding dim must be {EMBED_DIM}, got {out}")));
        }
        Ok(EmbeddingNet { layers, normalize_output })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(|l| l.outputs)).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "feature has {} values, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn trace(&self, x: &[f32]) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.affine(&a);
            if i < last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            inputs.push(std::mem::replace(&mut a, z));
        }
        let out = if self.normalize_output {
            let norm = l2(&a);
            if norm > 0.0 {
                a.iter().map(|v| v / norm).collect()
            } else {
                a.clone()
            }
        } else {
            a.clone()
        };
        Trace { inputs, raw: a, out }
    }

    fn embed64(&self, x: &[f32]) -> Vec<f64> {
        self.trace(x).out
    }

    /// affine → ReLU → … → affine, optionally L2-normalized.
    pub fn forward(&self, feature: &[f32]) -> Result<Vec<f32>> {
        self.check_input(feature)?;
        Ok(self.embed64(feature).into_iter().map(|v| v as f32).collect())
    }

    /// Accumulates `d loss / d output` for one sample into `grads`.
    fn backprop(&self, trace: &Trace, d_out: &[f64], grads: &mut Gradients) {
        let mut delta: Vec<f64> = if self.normalize_output {
            let norm = l2(&trace.raw);
            if norm > 0.0 {
                let dot: f64 = trace.out.iter().zip(d_out).map(|(y, g)| y * g).sum();
                d_out.iter().zip(&trace.out).map(|(g, y)| (g - y * dot) / norm).collect()
            } else {
                d_out.to_vec()
            }
        } else {
            d_out.to_vec()
        };
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.inputs[i];
            let g = &mut grads.layers[i];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weight[o * layer.inputs..(o + 1) * layer.inputs];
                row.iter_mut().zip(input).for_each(|(w, &a)| *w += d * a);
            }
            if i == 0 {
                break;
            }
            let mut back = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
                back.iter_mut().zip(row).for_each(|(b, &w)| *b += d * w as f64);
            }
            // ReLU: the stored input is post-activation, zero exactly where inactive
            back.iter_mut().zip(input).for_each(|(b, &a)| {
                if a <= 0.0 {
                    *b = 0.0;
                }
            });
            delta = back;
        }
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn hinge(ea: &[f64], ep: &[f64], en: &[f64], margin: f64) -> f64 {
    (sq_dist(ea, ep) - sq_dist(ea, en) + margin).max(0.0)
}

/// `max(0, |ea - ep|² - |ea - en|² + margin)`.
pub fn triplet_loss(ea: &[f32], ep: &[f32], en: &[f32], margin: f64) -> f64 {
    let cast = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    hinge(&cast(ea), &cast(ep), &cast(en), margin)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients of the mean batch loss, shaped like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    /// Mean triplet loss of the batch.
    pub loss: f64,
}

impl Gradients {
    fn zeros(net: &EmbeddingNet) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| LayerGrad { weight: vec![0.0; l.weight.len()], bias: vec![0.0; l.bias.len()] })
            .collect();
        Gradients { layers, loss: 0.0 }
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|l| l.weight.iter().chain(&l.bias).all(|&g| g == 0.0))
    }

    /// All coordinates in layer order, weights before biases.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(&l.bias).copied()).collect()
    }
}

/// Anchor, positive and negative feature vectors.
pub type TripletFeatures<'a> = [&'a [f32]; 3];

/// Analytic gradients of the mean triplet loss over `batch`.
///
/// Triplets with zero loss contribute nothing; the ReLU derivative at 0 is 0.
pub fn backward(net: &EmbeddingNet, batch: &[TripletFeatures<'_>], margin: f64) -> Result<Gradients> {
    for t in batch {
        t.iter().try_for_each(|x| net.check_input(x))?;
    }
    Ok(backward_unchecked(net, batch, margin).0)
}

/// Gradients plus each triplet's loss.
fn backward_unchecked(net: &EmbeddingNet, batch: &[TripletFeatures<'_>], margin: f64) -> (Gradients, Vec<f64>) {
    let mut grads = Gradients::zeros(net);
    let mut losses = Vec::with_capacity(batch.len());
    if batch.is_empty() {
        return (grads, losses);
    }
    let scale = 1.0 / batch.len() as f64;
    for [a, p, n] in batch {
        let (ta, tp, tn) = (net.trace(a), net.trace(p), net.trace(n));
        let loss = hinge(&ta.out, &tp.out, &tn.out, margin);
        losses.push(loss);
        if loss <= 0.0 {
            continue;
        }
        let dim = ta.out.len();
        let mut ga = vec![0.0; dim];
        let mut gp = vec![0.0; dim];
        let mut gn = vec![0.0; dim];
        for k in 0..dim {
            let (ya, yp, yn) = (ta.out[k], tp.out[k], tn.out[k]);
            ga[k] = 2.0 * (yn - yp) * scale;
            gp[k] = 2.0 * (yp - ya) * scale;
            gn[k] = 2.0 * (ya - yn) * scale;
        }
        net.backprop(&ta, &ga, &mut grads);
        net.backprop(&tp, &gp, &mut grads);
        net.backprop(&tn, &gn, &mut grads);
    }
    grads.loss = losses.iter().sum::<f64>() * scale;
    (grads, losses)
}

/// A `[rows, dim]` matrix of appearance vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || dim == 0 || data.len() != rows * dim {
            return Err(Error::DimensionMismatch(format!("{} values cannot form a {rows}x{dim} matrix", data.len())));
        }
        Ok(FeatureMatrix { rows, dim, data })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let &[rows, dim] = t.shape() else {
            return Err(Error::DimensionMismatch(format!("feature matrix must be 2-d, got {:?}", t.shape())));
        };
        Self::new(rows, dim, t.as_f32()?.to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f32(vec![self.rows, self.dim], self.data.clone()).expect("validated")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// A `(tracklet id, frame)` reference, serialized as `[id, frame]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[u64; 2]", into = "[u64; 2]")]
pub struct FrameRef {
    pub id: u64,
    pub frame: u64,
}

impl From<[u64; 2]> for FrameRef {
    fn from(v: [u64; 2]) -> Self {
        FrameRef { id: v[0], frame: v[1] }
    }
}

impl From<FrameRef> for [u64; 2] {
    fn from(r: FrameRef) -> Self {
        [r.id, r.frame]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    #[serde(rename = "a")]
    pub anchor: FrameRef,
    #[serde(rename = "p")]
    pub positive: FrameRef,
    #[serde(rename = "n")]
    pub negative: FrameRef,
}

/// Samples `per_anchor` triplets for every anchor frame whose tracklet
/// overlaps at least one tracklet with another ID.
///
/// Positives are drawn uniformly from the other frames of the anchor's
/// tracklet (the anchor frame itself only for single-frame tracklets);
/// negatives uniformly from all frames of the overlapping tracklets.
pub fn mine_triplets(set: &TrackletSet, seed: u64, per_anchor: usize) -> Vec<Triplet> {
    let graph = overlap_graph(set);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for t in set.iter() {
        let negatives: Vec<_> = graph[&t.id].iter().filter_map(|id| set.get(*id)).collect();
        let pool: usize = negatives.iter().map(|n| n.len()).sum();
        if pool == 0 {
            continue;
        }
        let len = t.len() as u64;
        for frame in t.frames() {
            let anchor = FrameRef { id: t.id, frame };
            for _ in 0..per_anchor {
                let positive = if len >= 2 {
                    let k = rng.random_range(0..len - 1);
                    let k = if t.start + k >= frame { k + 1 } else { k };
                    FrameRef { id: t.id, frame: t.start + k }
                } else {
                    anchor
                };
                let mut k = rng.random_range(0..pool);
                let mut negative = None;
                for n in &negatives {
                    if k < n.len() {
                        negative = Some(FrameRef { id: n.id, frame: n.start + k as u64 });
                        break;
                    }
                    k -= n.len();
                }
                out.push(Triplet { anchor, positive, negative: negative.expect("k < pool") });
            }
        }
    }
    out
}

/// True when the triplet satisfies the mining rules on `set`.
pub fn triplet_is_valid(set: &TrackletSet, t: &Triplet) -> bool {
    let (Some(a), Some(n)) = (set.get(t.anchor.id), set.get(t.negative.id)) else {
        return false;
    };
    let positive_ok = t.positive.id == t.anchor.id
        && a.contains_frame(t.positive.frame)
        && (a.len() < 2 || t.positive.frame != t.anchor.frame);
    positive_ok
        && a.contains_frame(t.anchor.frame)
        && n.contains_frame(t.negative.frame)
        && t.negative.id != t.anchor.id
        && temporal_overlap(a, n)
}

/// Maps each triplet to feature-matrix rows `[anchor, positive, negative]`.
pub fn resolve_triplets(set: &TrackletSet, triplets: &[Triplet], features: &FeatureMatrix) -> Result<Vec<[usize; 3]>> {
    triplets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let rows = [t.anchor, t.positive, t.negative].map(|r| set.feature_row(r.id, r.frame));
            let rows = [rows[0].as_ref().copied(), rows[1].as_ref().copied(), rows[2].as_ref().copied()];
            let mut out = [0usize; 3];
            for (slot, r) in out.iter_mut().zip(rows) {
                let r = r.map_err(|e| Error::Record { line: i + 1, message: e.to_string() })?;
                if r >= features.rows() {
                    return Err(Error::Record {
                        line: i + 1,
                        message: format!("feature row {r} beyond matrix of {} rows", features.rows()),
                    });
                }
                *slot = r;
            }
            Ok(out)
        })
        .collect()
}

pub fn read_triplets(path: impl AsRef<Path>) -> Result<Vec<Triplet>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).in_file(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Record { line: i + 1, message: e.to_string() }))
        .collect::<Result<Vec<_>>>()
        .in_file(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub triplets_per_anchor: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: DEFAULT_MARGIN,
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 64,
            seed: 0,
            triplets_per_anchor: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin.is_nan() || self.margin <= 0.0 {
            return Err(Error::InvalidArgument(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid learning rate {}", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.triplets_per_anchor == 0 {
            return Err(Error::InvalidArgument("epochs, batch size and triplets per anchor must be positive".into()));
        }
        Ok(())
    }
}

/// Mini-batch gradient descent with seeded shuffling. Returns the trained
/// network and the mean triplet loss of every epoch (losses are measured on
/// each batch before its update).
pub fn train(
    net: &EmbeddingNet,
    features: &FeatureMatrix,
    triplets: &[[usize; 3]],
    config: &TrainConfig,
) -> Result<(EmbeddingNet, Vec<f64>)> {
    config.validate()?;
    if features.dim() != net.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "features have {} dims, network expects {}",
            features.dim(),
            net.input_dim()
        )));
    }
    if let Some(bad) = triplets.iter().flatten().find(|&&r| r >= features.rows()) {
        return Err(Error::InvalidArgument(format!("triplet references row {bad} of {}", features.rows())));
    }
    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let mut per_triplet = vec![0.0f64; triplets.len()];
    let mut trace = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TripletFeatures<'_>> =
                chunk.iter().map(|&i| triplets[i].map(|r| features.row(r))).collect();
            let (grads, losses) = backward_unchecked(&net, &batch, config.margin);
            for (&i, l) in chunk.iter().zip(losses) {
                per_triplet[i] = l;
            }
            apply(&mut net, &grads, config.learning_rate);
        }
        let mean = if triplets.is_empty() { 0.0 } else { per_triplet.iter().sum::<f64>() / triplets.len() as f64 };
        trace.push(mean);
    }
    Ok((net, trace))
}

fn apply(net: &mut EmbeddingNet, grads: &Gradients, lr: f64) {
    if lr == 0.0 {
        return;
    }
    for (layer, g) in net.layers.iter_mut().zip(&grads.layers) {
        for (w, d) in layer.weight.iter_mut().zip(&g.weight) {
            *w = (*w as f64 - lr * d) as f32;
        }
        for (b, d) in layer.bias.iter_mut().zip(&g.bias) {
            *b = (*b as f64 - lr * d) as f32;
        }
    }
}

/// Embeddings of every frame of every tracklet, in tracklet-then-frame order.
pub fn embed_tracklets(
    net: &EmbeddingNet,
    set: &TrackletSet,
    features: &FeatureMatrix,
) -> Result<Vec<(FrameRef, Vec<f32>)>> {
    let mut out = Vec::with_capacity(set.total_frames());
    for t in set.iter() {
        for frame in t.frames() {
            let row = set.feature_row(t.id, frame)?;
            if row >= features.rows() {
                return Err(Error::Validation(format!(
                    "tracklet {} frame {frame} refers to row {row} of {}",
                    t.id,
                    features.rows()
                )));
            }
            out.push((FrameRef { id: t.id, frame }, net.forward(features.row(row))?));
        }
    }
    Ok(out)
}

/// Mean frame embedding of each tracklet.
pub fn tracklet_centroids(
    net: &EmbeddingNet,
    set: &TrackletSet,
    features: &FeatureMatrix,
) -> Result<BTreeMap<u64, Vec<f32>>> {
    let mut sums: BTreeMap<u64, (Vec<f64>, usize)> = BTreeMap::new();
    for (r, e) in embed_tracklets(net, set, features)? {
        let (sum, n) = sums.entry(r.id).or_insert_with(|| (vec![0.0; e.len()], 0));
        sum.iter_mut().zip(&e).for_each(|(s, &v)| *s += v as f64);
        *n += 1;
    }
    Ok(sums.into_iter().map(|(id, (s, n))| (id, s.into_iter().map(|v| (v / n as f64) as f32).collect())).collect())
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub intra_mean: f64,
    pub inter_mean: f64,
    /// `intra_mean / inter_mean`; 0 when `inter_mean` is 0.
    pub ratio: f64,
}

/// Mean pairwise distance within and across identities.
///
/// Identities with a single sample contribute to `inter_mean` only.
pub fn separation_metrics(groups: &[Vec<Vec<f32>>]) -> Result<Separation> {
    if groups.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 identities, got {}", groups.len())));
    }
    let (mut intra, mut n_intra) = (0.0, 0usize);
    let (mut inter, mut n_inter) = (0.0, 0usize);
    for (gi, g) in groups.iter().enumerate() {
        for (i, a) in g.iter().enumerate() {
            for b in &g[i + 1..] {
                intra += euclidean(a, b);
                n_intra += 1;
            }
            for h in &groups[gi + 1..] {
                for b in h {
                    inter += euclidean(a, b);
                    n_inter += 1;
                }
            }
        }
    }
    let intra_mean = if n_intra > 0 { intra / n_intra as f64 } else { 0.0 };
    let inter_mean = if n_inter > 0 { inter / n_inter as f64 } else { 0.0 };
    let ratio = if inter_mean > 0.0 { intra_mean / inter_mean } else { 0.0 };
    Ok(Separation { intra_mean, inter_mean, ratio })
}

/// Groups frame embeddings by identity key, in ascending key order.
pub fn group_by_identity(embeddings: &[(FrameRef, Vec<f32>)], identity_of: impl Fn(u64) -> u64) -> Vec<Vec<Vec<f32>>> {
    let mut groups: BTreeMap<u64, Vec<Vec<f32>>> = BTreeMap::new();
    for (r, e) in embeddings {
        groups.entry(identity_of(r.id)).or_default().push(e.clone());
    }
    groups.into_values().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeProposal {
    pub a: u64,
    pub b: u64,
    pub distance: f64,
}

/// Pairs of temporally disjoint tracklets whose centroids lie within
/// `threshold`, closest first.
pub fn propose_merges(centroids: &BTreeMap<u64, Vec<f32>>, set: &TrackletSet, threshold: f64) -> Vec<MergeProposal> {
    let ids: Vec<u64> = centroids.keys().copied().filter(|id| set.get(*id).is_some()).collect();
    let mut out = Vec::new();
    for (i, &a) in ids.iter().enumerate() {
        for &b in &ids[i + 1..] {
            if temporal_overlap(set.get(a).unwrap(), set.get(b).unwrap()) {
                continue;
            }
            let distance = euclidean(&centroids[&a], &centroids[&b]);
            if distance <= threshold {
                out.push(MergeProposal { a, b, distance });
            }
        }
    }
    out.sort_by(|x, y| x.distance.total_cmp(&y.distance).then((x.a, x.b).cmp(&(y.a, y.b))));
    out
}

/// Top-two principal directions of a point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
    /// Covariance eigenvalues of the two components.
    pub variances: [f64; 2],
}

impl Pca2 {
    pub fn fit(points: &[Vec<f32>]) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidArgument(format!("PCA needs at least 2 samples, got {}", points.len())));
        }
        let d = points[0].len();
        if d == 0 || points.iter().any(|p| p.len() != d) {
            return Err(Error::DimensionMismatch("PCA samples must share a positive dimension".into()));
        }
        let n = points.len() as f64;
        let mut mean = vec![0.0; d];
        for p in points {
            mean.iter_mut().zip(p).for_each(|(m, &v)| *m += v as f64);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = vec![0.0; d * d];
        let mut centred = vec![0.0; d];
        for p in points {
            centred.iter_mut().zip(p).zip(&mean).for_each(|((c, &v), m)| *c = v as f64 - m);
            for i in 0..d {
                let ci = centred[i];
                if ci == 0.0 {
                    continue;
                }
                for j in i..d {
                    cov[i * d + j] += ci * centred[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1.0);
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        let (values, vectors) = jacobi_eigen(cov, d);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        let pick = |k: usize| -> (Vec<f64>, f64) {
            match order.get(k) {
                Some(&j) => {
                    let mut v: Vec<f64> = (0..d).map(|i| vectors[i * d + j]).collect();
                    let lead = v.iter().enumerate().fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
                    if v[lead] < 0.0 {
                        v.iter_mut().for_each(|x| *x = -*x);
                    }
                    (v, values[j].max(0.0))
                }
                None => (vec![0.0; d], 0.0),
            }
        };
        let (c0, v0) = pick(0);
        let (c1, v1) = pick(1);
        Ok(Pca2 { mean, components: [c0, c1], variances: [v0, v1] })
    }

    pub fn project(&self, p: &[f32]) -> [f64; 2] {
        let dot = |c: &[f64]| p.iter().zip(&self.mean).zip(c).map(|((&x, m), w)| (x as f64 - m) * w).sum::<f64>();
        [dot(&self.components[0]), dot(&self.components[1])]
    }
}

/// Mean-centred projection onto the two leading principal directions. Each
/// direction is signed so that its largest-magnitude loading is positive.
pub fn pca_project_2d(points: &[Vec<f32>]) -> Result<Vec<[f64; 2]>> {
    let pca = Pca2::fit(points)?;
    Ok(points.iter().map(|p| pca.project(p)).collect())
}

/// Cyclic Jacobi eigendecomposition of a symmetric row-major `d x d` matrix.
/// Returns eigenvalues and the eigenvectors as columns.
fn jacobi_eigen(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        return (vec![0.0; d], v);
    }
    for _sweep in 0..100 {
        let off: f64 = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * d + j].powi(2)).sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..d).map(|i| a[i * d + i]).collect(), v)
}

#[derive(Debug, Serialize, Deserialize)]
struct NetManifest {
    layer_dims: Vec<usize>,
    normalize_output: bool,
    layers: Vec<LayerFiles>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerFiles {
    weight: String,
    bias: String,
}

pub const NET_MANIFEST: &str = "manifest.json";

/// Writes one `MTENSOR` per weight and bias plus `manifest.json` into `dir`.
pub fn save_net(net: &EmbeddingNet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).in_file(dir)?;
    let mut layers = Vec::with_capacity(net.layers.len());
    for (i, l) in net.layers.iter().enumerate() {
        let files = LayerFiles { weight: format!("layer{i}.weight.mten"), bias: format!("layer{i}.bias.mten") };
        write_tensor(&Tensor::from_f32(vec![l.outputs, l.inputs], l.weight.clone())?, dir.join(&files.weight))?;
        write_tensor(&Tensor::from_f32(vec![l.outputs], l.bias.clone())?, dir.join(&files.bias))?;
        layers.push(files);
    }
    let manifest = NetManifest { layer_dims: net.layer_dims(), normalize_output: net.normalize_output, layers };
    let path = dir.join(NET_MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").in_file(&path)
}

pub fn load_net(dir: impl AsRef<Path>) -> Result<EmbeddingNet> {
    let dir = dir.as_ref();
    let path = dir.join(NET_MANIFEST);
    let text = fs::read_to_string(&path).in_file(&path)?;
    let manifest: NetManifest = serde_json::from_str(&text).in_file(&path)?;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for files in &manifest.layers {
        let w = read_tensor(dir.join(&files.weight))?;
        let b = read_tensor(dir.join(&files.bias))?;
        let &[outputs, inputs] = w.shape() else {
            return Err(Error::DimensionMismatch(format!("weights must be 2-d, got {:?}", w.shape())).in_file(dir.join(&files.weight)));
        };
        layers.push(Layer { inputs, outputs, weight: w.into_f32()?, bias: b.into_f32()? });
    }
    let net = EmbeddingNet::from_layers(layers, manifest.normalize_output).in_file(&path)?;
    if net.layer_dims() != manifest.layer_dims {
        return Err(Error::Validation(format!("manifest dims {:?} disagree with tensors", manifest.layer_dims)).in_file(&path));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::BBox;
    use crate::tracklets::Tracklet;

    fn tracklet(id: u64, start: u64, end: u64) -> Tracklet {
        let b = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        Tracklet::new(id, start, end, vec![b; (end - start + 1) as usize], None).unwrap()
    }

    fn small_net(seed: u64) -> EmbeddingNet {
        EmbeddingNet::with_hidden(4, &[6, 5], seed).unwrap()
    }

    #[test]
    fn triplet_loss_by_hand() {
        let z = [0.0f32, 0.0];
        assert_eq!(triplet_loss(&z, &z, &z, 1.0), 1.0);
        assert_eq!(triplet_loss(&z, &[1.0, 0.0], &[0.0, 2.0], 1.0), 0.0);
        assert_eq!(triplet_loss(&z, &[1.0, 0.0], &[0.0, 1.0], 1.0), 1.0);
    }

    #[test]
    fn zero_network_embeds_to_zero() {
        let mut net = EmbeddingNet::new(8, 1).unwrap();
        for l in net.layers_mut() {
            l.weight.iter_mut().for_each(|w| *w = 0.0);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let e = net.forward(&[3.0; 8]).unwrap();
        assert_eq!(e.len(), EMBED_DIM);
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_built_path_propagates_input() {
        // input 0 -> hidden 0 -> hidden 0 -> output 0, all unit weights
        let mut net = EmbeddingNet::with_hidden(2, &[3, 3], 0).unwrap();
        for l in net.layers_mut() {
            l.weight.iter_mut().for_each(|w| *w = 0.0);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
            l.weight[0] = 1.0;
        }
        let e = net.forward(&[2.5, -7.0]).unwrap();
        assert_eq!(e[0], 2.5);
        assert!(e[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_checks_dimension() {
        assert!(small_net(0).forward(&[1.0; 3]).is_err());
    }

    #[test]
    fn default_architecture() {
        let net = EmbeddingNet::new(32, 0).unwrap();
        assert_eq!(net.layer_dims(), vec![32, 512, 256, 128]);
    }

    #[test]
    fn inactive_batch_has_zero_gradient() {
        let net = small_net(3);
        let x = [0.5f32, -0.2, 0.1, 0.9];
        // anchor == positive, far-away negative: hinge inactive for margin 1e-9
        let far = [50.0f32, -40.0, 30.0, 20.0];
        let ea = net.forward(&x).unwrap();
        let en = net.forward(&far).unwrap();
        assert!(triplet_loss(&ea, &ea, &en, 1e-9) == 0.0);
        let g = backward(&net, &[[&x, &x, &far]], 1e-9).unwrap();
        assert!(g.is_zero());
        assert_eq!(g.loss, 0.0);
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradient() {
        let net = small_net(4);
        let xs: Vec<[f32; 4]> = (0..6).map(|i| [i as f32 * 0.3, 1.0 - i as f32 * 0.2, 0.5, -0.4 * i as f32]).collect();
        let batch: Vec<TripletFeatures<'_>> = (0..2).map(|i| [&xs[3 * i][..], &xs[3 * i + 1][..], &xs[3 * i + 2][..]]).collect();
        let doubled: Vec<_> = batch.iter().chain(&batch).copied().collect();
        let g1 = backward(&net, &batch, 10.0).unwrap();
        let g2 = backward(&net, &doubled, 10.0).unwrap();
        assert!(!g1.is_zero());
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        assert!((g1.loss - g2.loss).abs() < 1e-12);
    }

    #[test]
    fn mining_respects_overlap() {
        let set = TrackletSet::new([tracklet(1, 0, 50), tracklet(2, 30, 80), tracklet(3, 100, 120)]).unwrap();
        let triplets = mine_triplets(&set, 9, 2);
        assert!(!triplets.is_empty());
        for t in &triplets {
            assert!(triplet_is_valid(&set, t), "{t:?}");
            if t.anchor.id == 1 {
                assert_eq!(t.negative.id, 2);
            }
            assert_ne!(t.anchor.id, 3);
            assert_ne!(t.negative.id, 3);
        }
        // tracklets 1 and 2 provide 51 + 51 anchors
        assert_eq!(triplets.len(), 2 * (51 + 51));
        assert_eq!(mine_triplets(&set, 9, 2), triplets);
    }

    #[test]
    fn mining_degenerate_sets() {
        assert!(mine_triplets(&TrackletSet::default(), 0, 3).is_empty());
        let one = TrackletSet::new([tracklet(1, 0, 20)]).unwrap();
        assert!(mine_triplets(&one, 0, 3).is_empty());
    }

    #[test]
    fn triplet_json_shape() {
        let t = Triplet {
            anchor: FrameRef { id: 1, frame: 3 },
            positive: FrameRef { id: 1, frame: 4 },
            negative: FrameRef { id: 2, frame: 3 },
        };
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(s, r#"{"a":[1,3],"p":[1,4],"n":[2,3]}"#);
        assert_eq!(serde_json::from_str::<Triplet>(&s).unwrap(), t);
    }

    #[test]
    fn separation_degenerate_cases() {
        let p = vec![0.0f32, 0.0];
        let q = vec![3.0f32, 4.0];
        let s = separation_metrics(&[vec![p.clone(), p.clone()], vec![q.clone(), q.clone()]]).unwrap();
        assert_eq!((s.intra_mean, s.inter_mean, s.ratio), (0.0, 5.0, 0.0));
        let s = separation_metrics(&[vec![p.clone(), p.clone()], vec![p.clone()]]).unwrap();
        assert_eq!((s.intra_mean, s.inter_mean, s.ratio), (0.0, 0.0, 0.0));
        assert!(separation_metrics(&[vec![p]]).is_err());
    }

    #[test]
    fn merge_proposals_skip_overlaps() {
        let set = TrackletSet::new([tracklet(1, 0, 20), tracklet(2, 21, 40), tracklet(3, 10, 30)]).unwrap();
        let c: BTreeMap<u64, Vec<f32>> = [(1, vec![1.0, 1.0]), (2, vec![1.0, 1.0]), (3, vec![1.0, 1.0])].into();
        let m = propose_merges(&c, &set, 0.1);
        assert_eq!(m, vec![MergeProposal { a: 1, b: 2, distance: 0.0 }]);
    }

    #[test]
    fn merges_sorted_by_distance() {
        let set = TrackletSet::new([tracklet(1, 0, 5), tracklet(2, 10, 15), tracklet(3, 20, 25)]).unwrap();
        let c: BTreeMap<u64, Vec<f32>> = [(1, vec![0.0]), (2, vec![0.3]), (3, vec![0.1])].into();
        let m = propose_merges(&c, &set, 0.25);
        assert_eq!(m.iter().map(|p| (p.a, p.b)).collect::<Vec<_>>(), vec![(1, 3), (2, 3)]);
    }

    #[test]
    fn pca_on_collinear_points() {
        let pts: Vec<Vec<f32>> = (0..10).map(|i| vec![i as f32, 2.0 * i as f32, -(i as f32)]).collect();
        let proj = pca_project_2d(&pts).unwrap();
        let spread = proj.iter().map(|p| p[0].abs()).fold(0.0, f64::max);
        assert!(proj.iter().all(|p| p[1].abs() < 1e-6 * spread));
    }

    #[test]
    fn pca_axis_aligned() {
        let pts: Vec<Vec<f32>> = vec![vec![-3.0, 0.0], vec![3.0, 0.0], vec![0.0, -1.0], vec![0.0, 1.0]];
        let proj = pca_project_2d(&pts).unwrap();
        for (p, q) in proj.iter().zip(&pts) {
            assert!((p[0] - q[0] as f64).abs() < 1e-9);
            assert!((p[1] - q[1] as f64).abs() < 1e-9);
        }
        assert!(pca_project_2d(&pts[..1]).is_err());
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let net = small_net(5);
        let feats = FeatureMatrix::new(4, 4, (0..16).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let triplets = vec![[0, 1, 2], [1, 0, 3], [2, 3, 0]];
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 4, batch_size: 2, margin: 5.0, ..Default::default() };
        let (trained, trace) = train(&net, &feats, &triplets, &cfg).unwrap();
        assert_eq!(trained, net);
        assert!(trace.iter().all(|&l| l == trace[0]));
    }

    #[test]
    fn net_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = small_net(8);
        net.normalize_output = true;
        save_net(&net, dir.path()).unwrap();
        assert_eq!(load_net(dir.path()).unwrap(), net);
    }
}
