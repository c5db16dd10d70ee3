//! Scene data model and the newline-delimited scene file format.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist, Point};

/// Past samples per trajectory (2 s at 10 Hz).
pub const TP: usize = 20;
/// Future samples to predict (3 s at 10 Hz).
pub const TF: usize = 30;

pub type SegmentId = u32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneSegment {
    pub id: SegmentId,
    pub nodes: Vec<Point>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LaneGraph {
    pub segments: Vec<LaneSegment>,
    #[serde(default)]
    pub successors: BTreeMap<SegmentId, Vec<SegmentId>>,
    #[serde(default)]
    pub predecessors: BTreeMap<SegmentId, Vec<SegmentId>>,
    #[serde(default)]
    pub left: BTreeMap<SegmentId, SegmentId>,
    #[serde(default)]
    pub right: BTreeMap<SegmentId, SegmentId>,
}

impl LaneGraph {
    pub fn segment(&self, id: SegmentId) -> Option<&LaneSegment> {
        self.segments.iter().find(|s| s.id == id)
    }

    pub fn successors_of(&self, id: SegmentId) -> &[SegmentId] {
        self.successors.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Adds `to` as a successor of `from` and keeps predecessors in sync.
    pub fn connect(&mut self, from: SegmentId, to: SegmentId) {
        self.successors.entry(from).or_default().push(to);
        self.predecessors.entry(to).or_default().push(from);
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.segments {
            if !seen.insert(s.id) {
                return Err(Error::Invalid(format!("duplicate segment id {}", s.id)));
            }
            crate::geometry::Polyline::new(s.nodes.clone())
                .map_err(|e| Error::Invalid(format!("segment {}: {e}", s.id)))?;
        }
        let known = |id: &SegmentId| seen.contains(id);
        for (from, tos) in &self.successors {
            for to in tos {
                if !known(from) || !known(to) {
                    return Err(Error::Invalid(format!(
                        "edge {from}->{to} names a missing segment"
                    )));
                }
                if !self.predecessors.get(to).is_some_and(|p| p.contains(from)) {
                    return Err(Error::Invalid(format!(
                        "successor {from}->{to} lacks predecessor"
                    )));
                }
                let a = self.segment(*from).unwrap().nodes.last().copied().unwrap();
                let b = self.segment(*to).unwrap().nodes[0];
                if dist(a, b) > 0.5 {
                    return Err(Error::Invalid(format!(
                        "segment {to} starts {:.2} m from the end of {from}",
                        dist(a, b)
                    )));
                }
            }
        }
        for (to, froms) in &self.predecessors {
            for from in froms {
                if !self.successors_of(*from).contains(to) {
                    return Err(Error::Invalid(format!(
                        "predecessor {to}<-{from} lacks successor"
                    )));
                }
            }
        }
        for (a, b) in self.left.iter().chain(&self.right) {
            if !known(a) || !known(b) {
                return Err(Error::Invalid(format!(
                    "neighbor {a}/{b} names a missing segment"
                )));
            }
        }
        Ok(())
    }
}

/// One prediction instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub target_past: Vec<Point>,
    pub social_pasts: Vec<Vec<Point>>,
    pub lanes: LaneGraph,
    #[serde(default)]
    pub gt_future: Option<Vec<Point>>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.target_past.len() != TP {
            return Err(Error::Invalid(format!(
                "target_past has {} points, expected {TP}",
                self.target_past.len()
            )));
        }
        for (j, s) in self.social_pasts.iter().enumerate() {
            if s.len() != TP {
                return Err(Error::Invalid(format!(
                    "social_pasts[{j}] has {} points, expected {TP}",
                    s.len()
                )));
            }
        }
        if let Some(gt) = &self.gt_future {
            if gt.len() != TF {
                return Err(Error::Invalid(format!(
                    "gt_future has {} points, expected {TF}",
                    gt.len()
                )));
            }
        }
        let all = self
            .target_past
            .iter()
            .chain(self.social_pasts.iter().flatten())
            .chain(self.gt_future.iter().flatten());
        if all.flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite coordinate".into()));
        }
        self.lanes.validate()
    }

    /// Target position at t = 0.
    pub fn current_position(&self) -> Point {
        self.target_past[TP - 1]
    }
}

pub fn parse_scenes(text: &str) -> Result<Vec<Scene>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(line, i + 1)?);
    }
    Ok(out)
}

fn parse_line(line: &str, lineno: usize) -> Result<Scene> {
    let scene: Scene = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: lineno,
        msg: e.to_string(),
    })?;
    scene.validate().map_err(|e| Error::Parse {
        line: lineno,
        msg: e.to_string(),
    })?;
    Ok(scene)
}

pub fn load_scenes(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, i + 1)?);
    }
    Ok(out)
}

pub fn write_scenes<W: Write>(w: &mut W, scenes: &[Scene]) -> Result<()> {
    for s in scenes {
        let line = serde_json::to_string(s).map_err(|e| Error::Invalid(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn save_scenes(path: impl AsRef<Path>, scenes: &[Scene]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_scenes(&mut w, scenes)?;
    w.flush().map_err(|e| Error::io(path, e))
}
