//! Detection metrics: precision, recall, AP@0.5 and AP@0.5:0.95.
//!
//! Matching is greedy in descending score order (ties by frame, then input
//! order); each detection takes the highest-IoU unmatched ground truth of the
//! same frame and class. AP uses 101-point interpolation over a monotone
//! precision envelope.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};

pub const RECALL_POINTS: usize = 101;
pub const NUM_IOU_THRESHOLDS: usize = 10;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; NUM_IOU_THRESHOLDS] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Axis-aligned box in corner format, serialized as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x2 > x1 && y2 > y1) || ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::Validation(format!("degenerate box [{x1}, {y1}, {x2}, {y2}]")));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox { x1: self.x1 + dx, y1: self.y1 + dy, x2: self.x2 + dx, y2: self.y2 + dy }
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame: u64,
    pub bbox: BBox,
    pub score: f64,
    #[serde(rename = "class", default)]
    pub class_id: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub frame: u64,
    pub bbox: BBox,
    #[serde(rename = "class", default)]
    pub class_id: i64,
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, check: impl Fn(&T) -> Result<()>) -> Result<Vec<T>> {
    let file = fs::File::open(path).in_file(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.in_file(path)?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| Error::Record { line: i + 1, message: e.to_string() })
            .and_then(|r| check(&r).map(|_| r).map_err(|e| Error::Record { line: i + 1, message: e.to_string() }))
            .in_file(path)?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(records: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).in_file(path)
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    read_jsonl(path.as_ref(), |d: &Detection| {
        if (0.0..=1.0).contains(&d.score) {
            Ok(())
        } else {
            Err(Error::Validation(format!("score {} outside [0, 1]", d.score)))
        }
    })
}

pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<Vec<GroundTruth>> {
    read_jsonl(path.as_ref(), |_: &GroundTruth| Ok(()))
}

/// Detection indices in matching order: score descending, then frame, then
/// input position.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].score.total_cmp(&dets[a].score).then(dets[a].frame.cmp(&dets[b].frame)).then(a.cmp(&b))
    });
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// Detection indices in score order.
    pub order: Vec<usize>,
    /// True-positive flag per entry of `order`.
    pub tp: Vec<bool>,
    /// Ground-truth index matched by each entry of `order`.
    pub matched_gt: Vec<Option<usize>>,
    /// Unmatched ground truths per frame.
    pub false_negatives: BTreeMap<u64, usize>,
}

pub fn match_greedy(dets: &[Detection], gts: &[GroundTruth], iou_thr: f64) -> Matching {
    let mut by_key: BTreeMap<(u64, i64), Vec<usize>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_key.entry((g.frame, g.class_id)).or_default().push(i);
    }
    let order = score_order(dets);
    let mut taken = vec![false; gts.len()];
    let mut matched_gt = Vec::with_capacity(order.len());
    for &d in &order {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        for &g in by_key.get(&(det.frame, det.class_id)).into_iter().flatten() {
            if taken[g] {
                continue;
            }
            let o = iou(&det.bbox, &gts[g].bbox);
            if o >= iou_thr && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
        }
        matched_gt.push(best.map(|(g, _)| g));
    }
    let mut false_negatives = BTreeMap::new();
    for (g, gt) in gts.iter().enumerate() {
        let slot = false_negatives.entry(gt.frame).or_insert(0);
        if !taken[g] {
            *slot += 1;
        }
    }
    let tp = matched_gt.iter().map(Option::is_some).collect();
    Matching { order, tp, matched_gt, false_negatives }
}

/// 101-point interpolated AP from TP flags in descending-score order.
///
/// Returns `None` when there is nothing to evaluate (no ground truth and no
/// detections); with detections but no ground truth the AP is 0.
pub fn average_precision(flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return (!flags.is_empty()).then_some(0.0);
    }
    let mut tp_count = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        tp_count.push(tp);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        // recall >= r/100, in integers
        let i = tp_count.partition_point(|&t| t * 100 < r * num_gt);
        sum += precision.get(i).copied().unwrap_or(0.0);
    }
    Some(sum / RECALL_POINTS as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: i64,
    pub ap_per_threshold: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Confidence threshold of the reported operating point.
    pub confidence_threshold: Option<f64>,
    pub ap_per_threshold: Vec<f64>,
    pub map50: f64,
    pub map5095: f64,
    pub per_class: Vec<ClassAp>,
}

struct ClassData {
    class: i64,
    dets: Vec<Detection>,
    gts: Vec<GroundTruth>,
}

fn split_by_class(dets: &[Detection], gts: &[GroundTruth]) -> Vec<ClassData> {
    let classes: BTreeSet<i64> = dets.iter().map(|d| d.class_id).chain(gts.iter().map(|g| g.class_id)).collect();
    classes
        .into_iter()
        .map(|class| ClassData {
            class,
            dets: dets.iter().filter(|d| d.class_id == class).copied().collect(),
            gts: gts.iter().filter(|g| g.class_id == class).copied().collect(),
        })
        .collect()
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Precision and recall at the confidence threshold maximizing F1, computed
/// from per-class `(score, tp)` lists in matching order.
fn best_f1(per_class: &[(Vec<(f64, bool)>, usize)]) -> (f64, f64, f64, Option<f64>) {
    let mut thresholds: Vec<f64> = per_class.iter().flat_map(|(r, _)| r.iter().map(|&(s, _)| s)).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();

    let mut cursor = vec![0usize; per_class.len()];
    let mut tps = vec![0usize; per_class.len()];
    let mut best = (0.0, 0.0, 0.0, None);
    for &s in &thresholds {
        let mut ps = Vec::with_capacity(per_class.len());
        let mut rs = Vec::with_capacity(per_class.len());
        for (k, (ranked, num_gt)) in per_class.iter().enumerate() {
            while cursor[k] < ranked.len() && ranked[cursor[k]].0 >= s {
                tps[k] += ranked[cursor[k]].1 as usize;
                cursor[k] += 1;
            }
            ps.push(if cursor[k] > 0 { tps[k] as f64 / cursor[k] as f64 } else { 0.0 });
            rs.push(if *num_gt > 0 { tps[k] as f64 / *num_gt as f64 } else { 0.0 });
        }
        let (p, r) = (mean(&ps), mean(&rs));
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        if best.3.is_none() || f1 > best.2 {
            best = (p, r, f1, Some(s));
        }
    }
    best
}

pub fn evaluate(dets: &[Detection], gts: &[GroundTruth]) -> EvalReport {
    let classes = split_by_class(dets, gts);
    let thresholds = iou_thresholds();
    let mut per_class = Vec::with_capacity(classes.len());
    let mut ranked_at_50 = Vec::with_capacity(classes.len());

    for c in &classes {
        let mut aps = Vec::with_capacity(NUM_IOU_THRESHOLDS);
        for (t, &thr) in thresholds.iter().enumerate() {
            let m = match_greedy(&c.dets, &c.gts, thr);
            if t == 0 {
                ranked_at_50.push((m.order.iter().zip(&m.tp).map(|(&d, &tp)| (c.dets[d].score, tp)).collect(), c.gts.len()));
            }
            aps.extend(average_precision(&m.tp, c.gts.len()));
        }
        if aps.len() == NUM_IOU_THRESHOLDS {
            per_class.push(ClassAp { class: c.class, ap_per_threshold: aps });
        }
    }

    let ap_per_threshold: Vec<f64> = (0..NUM_IOU_THRESHOLDS)
        .map(|t| mean(&per_class.iter().map(|c| c.ap_per_threshold[t]).collect::<Vec<_>>()))
        .collect();
    let (precision, recall, f1, confidence_threshold) = best_f1(&ranked_at_50);
    EvalReport {
        precision,
        recall,
        f1,
        confidence_threshold,
        map50: ap_per_threshold[0],
        map5095: mean(&ap_per_threshold),
        ap_per_threshold,
        per_class,
    }
}
