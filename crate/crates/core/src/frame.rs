//! Agent-centric normalization.

use crate::geometry::{heading, Point};
use crate::scene::{Scene, TP};

/// Rigid motion mapping world coordinates to the agent frame: translate by
/// `−origin`, then rotate by `−theta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub origin: Point,
    pub theta: f64,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            origin: [0.0, 0.0],
            theta: 0.0,
        }
    }

    pub fn to_local(&self, p: Point) -> Point {
        let (s, c) = self.theta.sin_cos();
        let dx = p[0] - self.origin[0];
        let dy = p[1] - self.origin[1];
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn to_world(&self, p: Point) -> Point {
        let (s, c) = self.theta.sin_cos();
        [
            c * p[0] - s * p[1] + self.origin[0],
            s * p[0] + c * p[1] + self.origin[1],
        ]
    }

    pub fn map_local(&self, pts: &[Point]) -> Vec<Point> {
        pts.iter().map(|&p| self.to_local(p)).collect()
    }

    pub fn map_world(&self, pts: &[Point]) -> Vec<Point> {
        pts.iter().map(|&p| self.to_world(p)).collect()
    }
}

/// A scene expressed in its target's frame together with the transform used.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedScene {
    pub scene: Scene,
    pub transform: RigidTransform,
}

/// Moves every coordinate of `scene` into the frame where the target sits at
/// the origin at t = 0 heading along +x.
pub fn to_agent_frame(scene: &Scene) -> NormalizedScene {
    let transform = RigidTransform {
        origin: scene.target_past[TP - 1],
        theta: heading(&scene.target_past, TP - 1),
    };
    let mut out = scene.clone();
    out.target_past = transform.map_local(&scene.target_past);
    out.social_pasts = scene
        .social_pasts
        .iter()
        .map(|s| transform.map_local(s))
        .collect();
    for seg in &mut out.lanes.segments {
        seg.nodes = transform.map_local(&seg.nodes);
    }
    out.gt_future = scene.gt_future.as_ref().map(|g| transform.map_local(g));
    NormalizedScene {
        scene: out,
        transform,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::dist;
    use crate::scene::{LaneGraph, LaneSegment, TF};
    use std::f64::consts::FRAC_PI_2;

    fn scene(past: Vec<Point>) -> Scene {
        Scene {
            scene_id: "f".into(),
            target_past: past,
            social_pasts: vec![vec![[5.0, 5.0]; TP]],
            lanes: LaneGraph {
                segments: vec![LaneSegment {
                    id: 0,
                    nodes: vec![[-3.0, 1.0], [40.0, -7.0]],
                }],
                ..Default::default()
            },
            gt_future: Some(vec![[1.0, 2.0]; TF]),
        }
    }

    #[test]
    fn normalized_scene_maps_by_identity() {
        let past: Vec<Point> = (0..TP).map(|i| [i as f64 - 19.0, 0.0]).collect();
        let s = scene(past);
        let n = to_agent_frame(&s);
        assert_eq!(n.transform, RigidTransform::identity());
        assert_eq!(n.scene, s);
    }

    #[test]
    fn round_trip_recovers_world_coordinates() {
        let past: Vec<Point> = (0..TP)
            .map(|i| [123.4 + 0.7 * i as f64, -56.7 + 0.9 * i as f64])
            .collect();
        let s = scene(past);
        let n = to_agent_frame(&s);
        assert!(n.scene.target_past[TP - 1].iter().all(|v| v.abs() < 1e-9));
        let h = heading(&n.scene.target_past, TP - 1);
        assert!(h.abs() < 1e-9);
        for (a, b) in n
            .transform
            .map_world(&n.scene.target_past)
            .iter()
            .zip(&s.target_past)
        {
            assert!(dist(*a, *b) < 1e-9);
        }
        let back = n.transform.map_world(&n.scene.lanes.segments[0].nodes);
        for (a, b) in back.iter().zip(&s.lanes.segments[0].nodes) {
            assert!(dist(*a, *b) < 1e-9);
        }
    }

    #[test]
    fn heading_south_rotates_by_quarter_turn() {
        let past: Vec<Point> = (0..TP).map(|i| [2.0, -(i as f64)]).collect();
        let n = to_agent_frame(&scene(past));
        assert!((n.transform.theta + FRAC_PI_2).abs() < 1e-15);
        // a point one meter further south lands on +x
        let p = n.transform.to_local([2.0, -20.0]);
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1].abs() < 1e-12);
    }
}
