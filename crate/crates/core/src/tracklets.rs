//! Tracklets: contiguous per-ID trajectory segments produced by a tracker.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};
use crate::metrics::BBox;

pub const DEFAULT_MIN_LEN: usize = 16;

/// Frames `start..=end` of one tracking ID, with one box per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTracklet")]
pub struct Tracklet {
    pub id: u64,
    pub start: u64,
    pub end: u64,
    pub boxes: Vec<BBox>,
    /// Row of each frame's appearance vector in the feature matrix.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_rows: Option<Vec<usize>>,
}

#[derive(Deserialize)]
struct RawTracklet {
    id: u64,
    start: u64,
    end: u64,
    boxes: Vec<BBox>,
    #[serde(default)]
    feature_rows: Option<Vec<usize>>,
}

impl TryFrom<RawTracklet> for Tracklet {
    type Error = Error;

    fn try_from(r: RawTracklet) -> Result<Self> {
        Tracklet::new(r.id, r.start, r.end, r.boxes, r.feature_rows)
    }
}

impl Tracklet {
    pub fn new(id: u64, start: u64, end: u64, boxes: Vec<BBox>, feature_rows: Option<Vec<usize>>) -> Result<Self> {
        if end < start {
            return Err(Error::Validation(format!("tracklet {id}: end {end} precedes start {start}")));
        }
        let len = (end - start + 1) as usize;
        if boxes.len() != len {
            return Err(Error::Validation(format!(
                "tracklet {id}: frames {start}..={end} need {len} boxes, found {} (tracklets must be contiguous)",
                boxes.len()
            )));
        }
        if feature_rows.as_ref().is_some_and(|r| r.len() != len) {
            return Err(Error::Validation(format!("tracklet {id}: feature_rows length differs from frame count")));
        }
        Ok(Tracklet { id, start, end, boxes, feature_rows })
    }

    pub fn len(&self) -> usize {
        (self.end - self.start + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frames(&self) -> impl Iterator<Item = u64> {
        self.start..=self.end
    }

    pub fn contains_frame(&self, frame: u64) -> bool {
        (self.start..=self.end).contains(&frame)
    }

    pub fn box_at(&self, frame: u64) -> Option<&BBox> {
        self.contains_frame(frame).then(|| &self.boxes[(frame - self.start) as usize])
    }

    pub fn feature_row(&self, frame: u64) -> Option<usize> {
        let rows = self.feature_rows.as_ref()?;
        self.contains_frame(frame).then(|| rows[(frame - self.start) as usize])
    }
}

/// Closed-interval overlap: the two tracklets share at least one frame.
pub fn temporal_overlap(a: &Tracklet, b: &Tracklet) -> bool {
    a.start <= b.end && b.start <= a.end
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackletSet {
    tracklets: BTreeMap<u64, Tracklet>,
}

#[derive(Serialize, Deserialize)]
struct TrackletFile {
    tracklets: Vec<Tracklet>,
}

impl TrackletSet {
    pub fn new(tracklets: impl IntoIterator<Item = Tracklet>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for t in tracklets {
            let id = t.id;
            if map.insert(id, t).is_some() {
                return Err(Error::Validation(format!("duplicate tracklet id {id}")));
            }
        }
        Ok(TrackletSet { tracklets: map })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).in_file(path)?;
        let file: TrackletFile = serde_json::from_str(&text).in_file(path)?;
        Self::new(file.tracklets).in_file(path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = TrackletFile { tracklets: self.tracklets.values().cloned().collect() };
        fs::write(path, serde_json::to_string(&file)? + "\n").in_file(path)
    }

    pub fn len(&self) -> usize {
        self.tracklets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracklets.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&Tracklet> {
        self.tracklets.get(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.tracklets.keys().copied()
    }

    /// Tracklets in ascending ID order.
    pub fn iter(&self) -> impl Iterator<Item = &Tracklet> {
        self.tracklets.values()
    }

    /// First and last frame covered by any tracklet.
    pub fn frame_span(&self) -> Option<(u64, u64)> {
        let start = self.iter().map(|t| t.start).min()?;
        let end = self.iter().map(|t| t.end).max()?;
        Some((start, end))
    }

    pub fn total_frames(&self) -> usize {
        self.iter().map(Tracklet::len).sum()
    }

    /// Feature-matrix row for `(id, frame)`.
    pub fn feature_row(&self, id: u64, frame: u64) -> Result<usize> {
        let t = self.get(id).ok_or_else(|| Error::Validation(format!("unknown tracklet id {id}")))?;
        if !t.contains_frame(frame) {
            return Err(Error::Validation(format!("tracklet {id} has no frame {frame}")));
        }
        t.feature_row(frame).ok_or_else(|| Error::Validation(format!("tracklet {id} carries no feature_rows")))
    }
}

/// Keeps tracklets spanning at least `min_len` frames.
pub fn filter_min_length(set: &TrackletSet, min_len: usize) -> TrackletSet {
    TrackletSet { tracklets: set.tracklets.iter().filter(|(_, t)| t.len() >= min_len).map(|(&k, t)| (k, t.clone())).collect() }
}

/// Symmetric temporal-overlap adjacency without self edges. Every ID has an
/// entry, possibly empty.
pub fn overlap_graph(set: &TrackletSet) -> BTreeMap<u64, BTreeSet<u64>> {
    let mut graph: BTreeMap<u64, BTreeSet<u64>> = set.ids().map(|id| (id, BTreeSet::new())).collect();
    let all: Vec<&Tracklet> = set.iter().collect();
    for (i, a) in all.iter().enumerate() {
        for b in &all[i + 1..] {
            if temporal_overlap(a, b) {
                graph.get_mut(&a.id).unwrap().insert(b.id);
                graph.get_mut(&b.id).unwrap().insert(a.id);
            }
        }
    }
    graph
}

/// Groups of tracking IDs known to be the same individual.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawIdentityMap")]
pub struct IdentityMap {
    pub groups: Vec<Vec<u64>>,
}

#[derive(Deserialize)]
struct RawIdentityMap {
    groups: Vec<Vec<u64>>,
}

impl TryFrom<RawIdentityMap> for IdentityMap {
    type Error = Error;

    fn try_from(r: RawIdentityMap) -> Result<Self> {
        IdentityMap::new(r.groups)
    }
}

impl IdentityMap {
    pub fn new(groups: Vec<Vec<u64>>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for id in groups.iter().flatten() {
            if !seen.insert(*id) {
                return Err(Error::Validation(format!("id {id} appears in more than one identity group")));
            }
        }
        Ok(IdentityMap { groups })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).in_file(path)?;
        serde_json::from_str(&text).in_file(path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string(self)? + "\n").in_file(path)
    }

    /// Identity key of a tracking ID: the smallest ID of its group, or the ID
    /// itself when it belongs to no group.
    pub fn identity_of(&self, id: u64) -> u64 {
        self.groups
            .iter()
            .find(|g| g.contains(&id))
            .and_then(|g| g.iter().min().copied())
            .unwrap_or(id)
    }

    pub fn same_identity(&self, a: u64, b: u64) -> bool {
        self.identity_of(a) == self.identity_of(b)
    }

    /// Every unordered same-identity pair `(lo, hi)`, sorted.
    pub fn pairs(&self) -> BTreeSet<(u64, u64)> {
        let mut out = BTreeSet::new();
        for g in &self.groups {
            for (i, &a) in g.iter().enumerate() {
                for &b in &g[i + 1..] {
                    out.insert((a.min(b), a.max(b)));
                }
            }
        }
        out
    }
}
