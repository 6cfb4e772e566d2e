//! Independent reference implementations used as test oracles. They favour
//! the most literal formulation over speed and share no code with the
//! library beyond its data types.
#![allow(dead_code)]

use std::collections::BTreeSet;

use motionstack::embed::EmbeddingNet;
use motionstack::metrics::{BBox, Detection, GroundTruth};
use motionstack::roi::FeatureMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

// ---------------------------------------------------------------- convolution

/// Zero-pads explicitly, then sums kernel taps in the outer loops.
pub fn conv_oracle(
    input: &[f32],
    (c, h, w): (usize, usize, usize),
    weight: &[f32],
    bias: Option<&[f32]>,
    (c_out, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut padded = vec![0.0f64; c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                padded[(ch * ph + y + pad) * pw + x + pad] = input[(ch * h + y) * w + x] as f64;
            }
        }
    }
    let oh = (ph - kh) / stride + 1;
    let ow = (pw - kw) / stride + 1;
    let mut out = vec![0.0f64; c_out * oh * ow];
    for o in 0..c_out {
        for ch in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = weight[((o * c + ch) * kh + ky) * kw + kx] as f64;
                    for y in 0..oh {
                        for x in 0..ow {
                            out[(o * oh + y) * ow + x] += wv * padded[(ch * ph + y * stride + ky) * pw + x * stride + kx];
                        }
                    }
                }
            }
        }
        if let Some(b) = bias {
            out[o * oh * ow..(o + 1) * oh * ow].iter_mut().for_each(|v| *v += b[o] as f64);
        }
    }
    (out, oh, ow)
}

// ------------------------------------------------------------- detection eval

pub fn iou_oracle(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if inter == 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Processing order: score descending, ties by frame, then input position.
pub fn order_oracle(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    // insertion sort with an explicit "comes before" relation
    let before = |a: usize, b: usize| {
        let (da, db) = (&dets[a], &dets[b]);
        da.score > db.score || (da.score == db.score && (da.frame < db.frame || (da.frame == db.frame && a < b)))
    };
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && before(idx[j], idx[j - 1]) {
            idx.swap(j, j - 1);
            j -= 1;
        }
    }
    idx
}

/// Enumerates every injective assignment of detections (in processing order)
/// to eligible ground truths, and keeps the one that is lexicographically
/// best when each detection prefers matching, then higher IoU, then the
/// lower GT index. Returns TP flags in processing order.
pub fn brute_force_flags(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> Vec<bool> {
    let order = order_oracle(dets);
    let candidates: Vec<Vec<(usize, f64)>> = order
        .iter()
        .map(|&d| {
            gts.iter()
                .enumerate()
                .filter(|(_, g)| g.frame == dets[d].frame && g.class_id == dets[d].class_id)
                .map(|(gi, g)| (gi, iou_oracle(&dets[d].bbox, &g.bbox)))
                .filter(|&(_, o)| o >= thr)
                .collect()
        })
        .collect();

    type Key = Vec<(bool, f64, i64)>;
    fn better(a: &Key, b: &Key) -> bool {
        for (x, y) in a.iter().zip(b) {
            if x.0 != y.0 {
                return x.0 & !y.0;
            }
            if x.1 != y.1 {
                return x.1 > y.1;
            }
            if x.2 != y.2 {
                return x.2 > y.2;
            }
        }
        false
    }
    fn search(k: usize, cands: &[Vec<(usize, f64)>], used: &mut BTreeSet<usize>, cur: &mut Key, best: &mut Option<Key>) {
        if k == cands.len() {
            if best.as_ref().is_none_or(|b| better(cur, b)) {
                *best = Some(cur.clone());
            }
            return;
        }
        for &(g, o) in &cands[k] {
            if used.insert(g) {
                cur.push((true, o, -(g as i64)));
                search(k + 1, cands, used, cur, best);
                cur.pop();
                used.remove(&g);
            }
        }
        cur.push((false, 0.0, 0));
        search(k + 1, cands, used, cur, best);
        cur.pop();
    }
    let mut best = None;
    search(0, &candidates, &mut BTreeSet::new(), &mut Vec::new(), &mut best);
    best.unwrap().into_iter().map(|k| k.0).collect()
}

/// 101-point AP by walking the PR staircase: for every recall level take the
/// best precision among ranks reaching it.
pub fn staircase_ap(flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return if flags.is_empty() { None } else { Some(0.0) };
    }
    let points: Vec<(usize, f64)> = (1..=flags.len())
        .map(|k| {
            let tp = flags[..k].iter().filter(|&&f| f).count();
            (tp, tp as f64 / k as f64)
        })
        .collect();
    let mut sum = 0.0;
    for r in 0..=100usize {
        let best = points
            .iter()
            .filter(|(tp, _)| tp * 100 >= r * num_gt)
            .map(|&(_, p)| p)
            .fold(0.0f64, f64::max);
        sum += best;
    }
    Some(sum / 101.0)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub ap_per_threshold: Vec<f64>,
    pub map50: f64,
    pub map5095: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Full evaluation from the brute-force matcher and staircase AP.
pub fn evaluate_oracle(dets: &[Detection], gts: &[GroundTruth]) -> OracleReport {
    let classes: BTreeSet<i64> = dets.iter().map(|d| d.class_id).chain(gts.iter().map(|g| g.class_id)).collect();
    let mut per_class_aps: Vec<Vec<f64>> = Vec::new();
    let mut at50: Vec<(Vec<(f64, bool)>, usize)> = Vec::new();
    for &c in &classes {
        let cd: Vec<Detection> = dets.iter().filter(|d| d.class_id == c).copied().collect();
        let cg: Vec<GroundTruth> = gts.iter().filter(|g| g.class_id == c).copied().collect();
        let order = order_oracle(&cd);
        let mut aps = Vec::new();
        for i in 0..10 {
            let thr = (50 + 5 * i) as f64 / 100.0;
            let flags = brute_force_flags(&cd, &cg, thr);
            if i == 0 {
                at50.push((order.iter().zip(&flags).map(|(&d, &f)| (cd[d].score, f)).collect(), cg.len()));
            }
            if let Some(ap) = staircase_ap(&flags, cg.len()) {
                aps.push(ap);
            }
        }
        if aps.len() == 10 {
            per_class_aps.push(aps);
        }
    }
    let ap_per_threshold: Vec<f64> =
        (0..10).map(|t| mean(&per_class_aps.iter().map(|a| a[t]).collect::<Vec<_>>())).collect();

    // operating point: every distinct score as a threshold, highest first
    let mut scores: Vec<f64> = at50.iter().flat_map(|(r, _)| r.iter().map(|x| x.0)).collect();
    scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
    scores.dedup();
    let (mut best_f1, mut precision, mut recall, mut found) = (0.0, 0.0, 0.0, false);
    for s in scores {
        let mut ps = Vec::new();
        let mut rs = Vec::new();
        for (ranked, num_gt) in &at50 {
            let kept: Vec<bool> = ranked.iter().filter(|x| x.0 >= s).map(|x| x.1).collect();
            let tp = kept.iter().filter(|&&f| f).count() as f64;
            ps.push(if kept.is_empty() { 0.0 } else { tp / kept.len() as f64 });
            rs.push(if *num_gt == 0 { 0.0 } else { tp / *num_gt as f64 });
        }
        let (p, r) = (mean(&ps), mean(&rs));
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        if !found || f1 > best_f1 {
            (best_f1, precision, recall, found) = (f1, p, r, true);
        }
    }
    OracleReport { map50: ap_per_threshold[0], map5095: mean(&ap_per_threshold), ap_per_threshold, precision, recall }
}

/// Random micro-instance: up to 5 GT and 7 detections over 2 frames on a
/// coarse grid (so IoUs land near the thresholds and scores tie).
pub fn micro_instance(rng: &mut ChaCha8Rng, classes: i64) -> (Vec<Detection>, Vec<GroundTruth>) {
    let rand_box = |rng: &mut ChaCha8Rng| {
        let x1 = rng.random_range(0..8) as f64;
        let y1 = rng.random_range(0..8) as f64;
        let w = rng.random_range(2..7) as f64;
        let h = rng.random_range(2..7) as f64;
        BBox::new(x1, y1, x1 + w, y1 + h).unwrap()
    };
    let n_gt = rng.random_range(0..=5);
    let n_det = rng.random_range(0..=7);
    let gts: Vec<GroundTruth> = (0..n_gt)
        .map(|_| GroundTruth { frame: rng.random_range(0..2), bbox: rand_box(rng), class_id: rng.random_range(0..classes) })
        .collect();
    let dets = (0..n_det)
        .map(|_| {
            let bbox = if !gts.is_empty() && rng.random_bool(0.6) {
                let g = &gts[rng.random_range(0..gts.len())];
                let (dx, dy) = (rng.random_range(-1..=1) as f64, rng.random_range(-1..=1) as f64);
                let d = Detection { frame: g.frame, bbox: g.bbox.translate(dx, dy), score: 0.0, class_id: g.class_id };
                return Detection { score: rng.random_range(1..=5) as f64 / 5.0, ..d };
            } else {
                rand_box(rng)
            };
            Detection {
                frame: rng.random_range(0..2),
                bbox,
                score: rng.random_range(1..=5) as f64 / 5.0,
                class_id: rng.random_range(0..classes),
            }
        })
        .collect();
    (dets, gts)
}

// --------------------------------------------------------------------- RoI

/// Bilinear interpolation as a tent-kernel sum over every cell.
pub fn bilinear_oracle(map: &FeatureMap, x: f64, y: f64) -> Vec<f64> {
    let x = x.max(0.0).min((map.width() - 1) as f64);
    let y = y.max(0.0).min((map.height() - 1) as f64);
    (0..map.channels())
        .map(|c| {
            let mut acc = 0.0;
            for i in 0..map.height() {
                for j in 0..map.width() {
                    let wy = (1.0 - (y - i as f64).abs()).max(0.0);
                    let wx = (1.0 - (x - j as f64).abs()).max(0.0);
                    acc += wy * wx * map.at(c, i, j) as f64;
                }
            }
            acc
        })
        .collect()
}

/// Dense RoIAlign: `[C][out_h][out_w]` in f64.
pub fn roi_align_oracle(map: &FeatureMap, b: &BBox, out_h: usize, out_w: usize, sr: usize) -> Vec<f64> {
    let s = map.spatial_scale;
    let (x0, y0) = (b.x1 * s - 0.5, b.y1 * s - 0.5);
    let (x1, y1) = (b.x2 * s - 0.5, b.y2 * s - 0.5);
    let mut out = vec![0.0; map.channels() * out_h * out_w];
    for ph in 0..out_h {
        for pw in 0..out_w {
            let mut samples = Vec::new();
            for iy in 0..sr {
                for ix in 0..sr {
                    // fractional position of the sample inside the box
                    let fy = (ph as f64 + (iy as f64 + 0.5) / sr as f64) / out_h as f64;
                    let fx = (pw as f64 + (ix as f64 + 0.5) / sr as f64) / out_w as f64;
                    samples.push(bilinear_oracle(map, x0 + fx * (x1 - x0), y0 + fy * (y1 - y0)));
                }
            }
            for c in 0..map.channels() {
                out[(c * out_h + ph) * out_w + pw] = samples.iter().map(|v| v[c]).sum::<f64>() / samples.len() as f64;
            }
        }
    }
    out
}

// ------------------------------------------------------------------- MLP

/// Network parameters as f64 matrices: `(weights[out][in], bias[out])`.
#[derive(Debug, Clone)]
pub struct MlpOracle {
    pub layers: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
    pub normalize: bool,
}

impl MlpOracle {
    pub fn from_net(net: &EmbeddingNet) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|l| {
                let w = (0..l.outputs)
                    .map(|o| (0..l.inputs).map(|i| l.weight[o * l.inputs + i] as f64).collect())
                    .collect();
                (w, l.bias.iter().map(|&b| b as f64).collect())
            })
            .collect();
        MlpOracle { layers, normalize: net.normalize_output }
    }

    /// Output plus the sign pattern of every hidden pre-activation.
    pub fn forward_with_pattern(&self, x: &[f64]) -> (Vec<f64>, Vec<bool>) {
        let mut a = x.to_vec();
        let mut pattern = Vec::new();
        for (k, (w, b)) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(b.len());
            for (row, bias) in w.iter().zip(b) {
                let mut s = *bias;
                for (wi, ai) in row.iter().zip(&a) {
                    s += wi * ai;
                }
                z.push(s);
            }
            if k + 1 < self.layers.len() {
                pattern.extend(z.iter().map(|&v| v > 0.0));
                z = z.into_iter().map(|v| if v > 0.0 { v } else { 0.0 }).collect();
            }
            a = z;
        }
        if self.normalize {
            let n = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                a = a.into_iter().map(|v| v / n).collect();
            }
        }
        (a, pattern)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_with_pattern(x).0
    }

    /// Mean hinge loss plus a fingerprint of every branch decision (ReLU
    /// states and active hinges).
    pub fn batch_loss(&self, batch: &[[Vec<f64>; 3]], margin: f64) -> (f64, Vec<bool>) {
        let mut total = 0.0;
        let mut branches = Vec::new();
        for [a, p, n] in batch {
            let (ea, pa) = self.forward_with_pattern(a);
            let (ep, pp) = self.forward_with_pattern(p);
            let (en, pn) = self.forward_with_pattern(n);
            let dap: f64 = ea.iter().zip(&ep).map(|(x, y)| (x - y) * (x - y)).sum();
            let dan: f64 = ea.iter().zip(&en).map(|(x, y)| (x - y) * (x - y)).sum();
            let raw = dap - dan + margin;
            branches.extend(pa);
            branches.extend(pp);
            branches.extend(pn);
            branches.push(raw > 0.0);
            total += raw.max(0.0);
        }
        (total / batch.len() as f64, branches)
    }

    fn param_mut(&mut self, mut k: usize) -> &mut f64 {
        for (w, b) in &mut self.layers {
            let nw = w.len() * w[0].len();
            if k < nw {
                let cols = w[0].len();
                return &mut w[k / cols][k % cols];
            }
            k -= nw;
            if k < b.len() {
                return &mut b[k];
            }
            k -= b.len();
        }
        panic!("parameter index out of range")
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|(w, b)| w.len() * w[0].len() + b.len()).sum()
    }

    /// Central differences in library flattening order (per layer: weights
    /// row-major, then biases). `None` marks coordinates whose ±eps
    /// perturbation crosses a ReLU or hinge kink, where the finite
    /// difference does not estimate the derivative.
    pub fn finite_differences(&self, batch: &[[Vec<f64>; 3]], margin: f64, eps: f64) -> Vec<Option<f64>> {
        let (_, base) = self.batch_loss(batch, margin);
        let mut probe = self.clone();
        (0..self.num_params())
            .map(|k| {
                let orig = *probe.param_mut(k);
                *probe.param_mut(k) = orig + eps;
                let (plus, bp) = probe.batch_loss(batch, margin);
                *probe.param_mut(k) = orig - eps;
                let (minus, bm) = probe.batch_loss(batch, margin);
                *probe.param_mut(k) = orig;
                (bp == base && bm == base).then(|| (plus - minus) / (2.0 * eps))
            })
            .collect()
    }
}

// ------------------------------------------------------------- statistics

pub fn pairwise_separation(groups: &[Vec<Vec<f32>>]) -> (f64, f64) {
    let dist = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| ((*x as f64) - (*y as f64)).powi(2)).sum::<f64>().sqrt();
    let mut intra = Vec::new();
    let mut inter = Vec::new();
    let flat: Vec<(usize, &Vec<f32>)> = groups.iter().enumerate().flat_map(|(g, v)| v.iter().map(move |x| (g, x))).collect();
    for i in 0..flat.len() {
        for j in 0..flat.len() {
            if i < j {
                if flat[i].0 == flat[j].0 {
                    intra.push(dist(flat[i].1, flat[j].1));
                } else {
                    inter.push(dist(flat[i].1, flat[j].1));
                }
            }
        }
    }
    (mean(&intra), mean(&inter))
}
