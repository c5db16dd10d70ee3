//! Heuristic lane proposals: depth-first expansion over the successor graph
//! from the segments nearest the target.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::geometry::{dist, resample_points, Point};
use crate::scene::{LaneGraph, Scene, SegmentId};

/// Lane segments farther than this from the target are never seeds.
pub const SEARCH_RADIUS: f64 = 25.0;
/// Look-ahead covered by each proposal, measured from the target's projection.
pub const LOOKAHEAD: f64 = 100.0;
/// Lane kept behind the target's projection.
pub const LOOKBEHIND: f64 = 15.0;
/// Proposals sharing more than this fraction of segments are duplicates.
pub const DEDUP_SHARE: f64 = 0.8;
const MAX_PATHS_PER_SEED: usize = 32;

/// A drivable path resampled to a fixed node count.
#[derive(Clone, Debug, PartialEq)]
pub struct LaneProposal {
    pub nodes: Vec<Point>,
    pub source_segment_ids: Vec<SegmentId>,
}

/// Distance from `p` to a polyline and the arc position of the closest point.
pub fn project(nodes: &[Point], p: Point) -> (f64, f64) {
    let mut best = (f64::INFINITY, 0.0);
    let mut acc = 0.0;
    for w in nodes.windows(2) {
        let (a, b) = (w[0], w[1]);
        let seg = [b[0] - a[0], b[1] - a[1]];
        let len2 = seg[0] * seg[0] + seg[1] * seg[1];
        let len = len2.sqrt();
        let f = if len2 > 0.0 {
            (((p[0] - a[0]) * seg[0] + (p[1] - a[1]) * seg[1]) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let q = [a[0] + f * seg[0], a[1] + f * seg[1]];
        let d = dist(p, q);
        if d < best.0 {
            best = (d, acc + f * len);
        }
        acc += len;
    }
    best
}

fn seg_len(nodes: &[Point]) -> f64 {
    nodes.windows(2).map(|w| dist(w[0], w[1])).sum()
}

/// Points of `pts` between arc positions `from` and `to`.
fn clip(pts: &[Point], from: f64, to: f64) -> Vec<Point> {
    let mut out = Vec::new();
    let mut acc = 0.0;
    let lerp = |a: Point, b: Point, f: f64| [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])];
    for w in pts.windows(2) {
        let len = dist(w[0], w[1]);
        let (s0, s1) = (acc, acc + len);
        if s1 >= from && s0 <= to && len > 0.0 {
            if out.is_empty() {
                out.push(lerp(w[0], w[1], ((from - s0) / len).clamp(0.0, 1.0)));
            }
            out.push(lerp(w[0], w[1], ((to - s0) / len).clamp(0.0, 1.0)));
        }
        acc = s1;
    }
    out.dedup_by(|a, b| dist(*a, *b) <= 1e-9);
    out
}

struct Seed {
    id: SegmentId,
    distance: f64,
    arc: f64,
}

fn seed_for(graph: &LaneGraph, id: SegmentId, p: Point) -> Option<Seed> {
    let seg = graph.segment(id)?;
    let (distance, arc) = project(&seg.nodes, p);
    Some(Seed { id, distance, arc })
}

fn expand(graph: &LaneGraph, seed: &Seed) -> Vec<Vec<SegmentId>> {
    let first = graph.segment(seed.id).expect("seed segment");
    let ahead = seg_len(&first.nodes) - seed.arc;
    let mut paths = Vec::new();
    let mut stack = vec![(vec![seed.id], ahead)];
    while let Some((path, covered)) = stack.pop() {
        let last = *path.last().unwrap();
        let succ = graph.successors_of(last);
        if covered >= LOOKAHEAD || succ.is_empty() {
            paths.push(path);
            if paths.len() >= MAX_PATHS_PER_SEED {
                break;
            }
            continue;
        }
        // reverse so the first listed successor is explored first
        for &s in succ.iter().rev() {
            if path.contains(&s) {
                continue;
            }
            if let Some(seg) = graph.segment(s) {
                let mut next = path.clone();
                next.push(s);
                stack.push((next, covered + seg_len(&seg.nodes)));
            }
        }
    }
    paths
}

fn path_points(graph: &LaneGraph, seed: &Seed, ids: &[SegmentId], p: Point) -> Vec<Point> {
    let mut pts: Vec<Point> = Vec::new();
    for id in ids {
        let seg = graph.segment(*id).expect("path segment");
        let skip = usize::from(pts.last().is_some_and(|l| dist(*l, seg.nodes[0]) <= 1e-9));
        pts.extend_from_slice(&seg.nodes[skip..]);
    }
    let mut start = (seed.arc - LOOKBEHIND).max(0.0);
    let begin = clip(&pts, start, start);
    if begin.first().is_some_and(|b| dist(*b, p) > SEARCH_RADIUS) {
        start = seed.arc;
    }
    clip(&pts, start, seed.arc + LOOKAHEAD)
}

fn shared_fraction(a: &[SegmentId], b: &[SegmentId]) -> f64 {
    let sa: BTreeSet<_> = a.iter().collect();
    let sb: BTreeSet<_> = b.iter().collect();
    let common = sa.intersection(&sb).count();
    common as f64 / sa.len().min(sb.len()).max(1) as f64
}

/// Candidate paths for the target of `scene`, each resampled to `h` nodes.
///
/// Seeds are the two segments nearest the target plus their left/right
/// neighbors; each seed is expanded depth-first along successors until the
/// path covers [`LOOKAHEAD`] meters ahead of the target, branching at forks.
/// Near-duplicate paths are dropped and the rest truncated to `max_n` in
/// order of seed distance.
pub fn extract_lane_proposals(scene: &Scene, h: usize, max_n: usize) -> Result<Vec<LaneProposal>> {
    let graph = &scene.lanes;
    let p = scene.current_position();
    let mut near: Vec<Seed> = graph
        .segments
        .iter()
        .filter_map(|s| seed_for(graph, s.id, p))
        .filter(|s| s.distance <= SEARCH_RADIUS)
        .collect();
    near.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.id.cmp(&b.id)));
    near.truncate(2);
    if near.is_empty() {
        return Err(Error::OffMap {
            scene_id: scene.scene_id.clone(),
            radius: SEARCH_RADIUS,
        });
    }
    let mut seeds: Vec<Seed> = Vec::new();
    for s in &near {
        for id in [
            Some(s.id),
            graph.left.get(&s.id).copied(),
            graph.right.get(&s.id).copied(),
        ]
        .into_iter()
        .flatten()
        {
            if seeds.iter().any(|x| x.id == id) {
                continue;
            }
            if let Some(seed) = seed_for(graph, id, p).filter(|x| x.distance <= SEARCH_RADIUS) {
                seeds.push(seed);
            }
        }
    }
    seeds.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.id.cmp(&b.id)));

    let mut out: Vec<LaneProposal> = Vec::new();
    for seed in &seeds {
        for ids in expand(graph, seed) {
            if out
                .iter()
                .any(|o| shared_fraction(&o.source_segment_ids, &ids) > DEDUP_SHARE)
            {
                continue;
            }
            let pts = path_points(graph, seed, &ids, p);
            let Ok(nodes) = resample_points(&pts, h) else {
                continue;
            };
            out.push(LaneProposal {
                nodes,
                source_segment_ids: ids,
            });
        }
    }
    out.truncate(max_n);
    if out.is_empty() {
        return Err(Error::OffMap {
            scene_id: scene.scene_id.clone(),
            radius: SEARCH_RADIUS,
        });
    }
    Ok(out)
}
