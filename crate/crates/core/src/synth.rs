//! Seeded synthetic scenarios over small hand-built lane graphs.
//!
//! Each template is laid out in a canonical frame (entry lane along +x,
//! junction at the origin) and then moved by a random rigid motion so that
//! downstream normalization is exercised.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frame::RigidTransform;
use crate::geometry::{dist, Point, DT};
use crate::scene::{LaneGraph, LaneSegment, Scene, SegmentId, TF, TP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Template {
    Straight,
    Curve,
    Fork,
    Intersection,
    Congestion,
}

impl Template {
    pub const ALL: [Template; 5] = [
        Template::Straight,
        Template::Curve,
        Template::Fork,
        Template::Intersection,
        Template::Congestion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Template::Straight => "straight",
            Template::Curve => "curve",
            Template::Fork => "fork",
            Template::Intersection => "intersection",
            Template::Congestion => "congestion",
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Template::ALL
            .into_iter()
            .find(|t| t.name() == s.trim())
            .ok_or_else(|| Error::UnknownTemplate(s.trim().to_string()))
    }
}

/// Integer-weighted template mix, written `straight:2,fork:1`. Scene `i`
/// takes the `i`-th entry of the expanded cycle, so counts are balanced.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateMix(pub Vec<(Template, u32)>);

impl TemplateMix {
    pub fn single(t: Template) -> Self {
        TemplateMix(vec![(t, 1)])
    }

    fn cycle(&self) -> Vec<Template> {
        self.0
            .iter()
            .flat_map(|&(t, w)| std::iter::repeat_n(t, w as usize))
            .collect()
    }
}

impl fmt::Display for TemplateMix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(t, w)| format!("{t}:{w}")).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for TemplateMix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = Vec::new();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let (name, w) = match part.split_once(':') {
                Some((n, w)) => {
                    let w: u32 = w
                        .trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad weight in `{part}`")))?;
                    (n, w)
                }
                None => (part, 1),
            };
            out.push((name.parse()?, w));
        }
        if out.iter().map(|(_, w)| *w).sum::<u32>() == 0 {
            return Err(Error::Config(format!("empty template mix `{s}`")));
        }
        Ok(TemplateMix(out))
    }
}

/// Arc-length parameterized polyline with linear extrapolation at both ends.
struct PathLine {
    pts: Vec<Point>,
    cum: Vec<f64>,
}

impl PathLine {
    fn new(pts: Vec<Point>) -> Self {
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            cum.push(cum.last().unwrap() + dist(w[0], w[1]));
        }
        PathLine { pts, cum }
    }

    fn locate(&self, s: f64) -> (Point, Point) {
        let n = self.pts.len();
        let i = match self.cum.iter().position(|&c| c > s) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => n - 2,
        };
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        let len = self.cum[i + 1] - self.cum[i];
        let t = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
        let f = s - self.cum[i];
        ([a[0] + t[0] * f, a[1] + t[1] * f], t)
    }

    /// Point at arc `s`, shifted `lateral` meters to the left.
    fn at(&self, s: f64, lateral: f64) -> Point {
        let (p, t) = self.locate(s);
        [p[0] - t[1] * lateral, p[1] + t[0] * lateral]
    }
}

fn straight(from: Point, heading: f64, length: f64) -> Vec<Point> {
    let (s, c) = heading.sin_cos();
    vec![from, [from[0] + c * length, from[1] + s * length]]
}

/// Circular arc starting at `from` with tangent `heading`, turning by
/// `angle` (positive = left), followed by a straight run of `tail` meters.
fn arc_then_straight(from: Point, heading: f64, radius: f64, angle: f64, tail: f64) -> Vec<Point> {
    let side = angle.signum();
    let center = [
        from[0] - side * radius * heading.sin(),
        from[1] + side * radius * heading.cos(),
    ];
    let start = (from[1] - center[1]).atan2(from[0] - center[0]);
    let steps = ((radius * angle.abs()).ceil() as usize).max(2);
    let mut pts: Vec<Point> = (0..=steps)
        .map(|k| {
            let a = start + angle * k as f64 / steps as f64;
            [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
        })
        .collect();
    pts[0] = from;
    let end = *pts.last().unwrap();
    let tail_pts = straight(end, heading + angle, tail);
    pts.push(tail_pts[1]);
    pts
}

struct Builder {
    graph: LaneGraph,
}

impl Builder {
    fn new() -> Self {
        Builder {
            graph: LaneGraph::default(),
        }
    }

    fn seg(&mut self, id: SegmentId, nodes: Vec<Point>) -> SegmentId {
        self.graph.segments.push(LaneSegment { id, nodes });
        id
    }

    fn nodes(&self, ids: &[SegmentId]) -> Vec<Point> {
        let mut pts: Vec<Point> = Vec::new();
        for &id in ids {
            let seg = self.graph.segment(id).unwrap();
            let skip = usize::from(pts.last().is_some_and(|l| dist(*l, seg.nodes[0]) < 1e-9));
            pts.extend_from_slice(&seg.nodes[skip..]);
        }
        pts
    }
}

/// Longitudinal profile of the target: arc position at step `t` relative to
/// its position at t = 0.
#[derive(Clone, Copy, Debug)]
enum Profile {
    /// speed (m/s), acceleration (m/s²) with no reversing
    Smooth { v: f64, a: f64 },
    /// constant speed in the past, braking to a stop after t = 0
    Brake { v: f64, decel: f64 },
}

impl Profile {
    fn arc(self, t: i32) -> f64 {
        let time = t as f64 * DT;
        match self {
            Profile::Smooth { v, a } => {
                // clamp so the speed never drops below 1 m/s
                let vmin = 1.0;
                let tc = if a < 0.0 {
                    (v - vmin) / -a
                } else {
                    f64::INFINITY
                };
                if time <= tc {
                    v * time + 0.5 * a * time * time
                } else {
                    v * tc + 0.5 * a * tc * tc + vmin * (time - tc)
                }
            }
            Profile::Brake { v, decel } => {
                if time <= 0.0 {
                    v * time
                } else {
                    let ts = v / decel;
                    let tt = time.min(ts);
                    v * tt - 0.5 * decel * tt * tt
                }
            }
        }
    }
}

/// Smooth lateral wobble bounded by 0.3 m.
struct Lateral {
    offset: f64,
    amp: f64,
    freq: f64,
    phase: f64,
}

impl Lateral {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Lateral {
            offset: rng.gen_range(-0.15..0.15),
            amp: rng.gen_range(0.0..0.15),
            freq: rng.gen_range(0.05..0.3),
            phase: rng.gen_range(0.0..2.0 * PI),
        }
    }

    fn at(&self, t: i32) -> f64 {
        self.offset + self.amp * (self.freq * t as f64 + self.phase).sin()
    }
}

fn trajectory(
    path: &PathLine,
    s0: f64,
    profile: Profile,
    lat: &Lateral,
    steps: impl Iterator<Item = i32>,
) -> Vec<Point> {
    steps
        .map(|t| path.at(s0 + profile.arc(t), lat.at(t)))
        .collect()
}

struct Layout {
    builder: Builder,
    /// segment ids of the target's route
    route: Vec<SegmentId>,
    /// arc position of the target at t = 0 along the route
    s0: f64,
    profile: Profile,
    /// leaders may be placed on the route ahead
    allow_leaders: bool,
    socials: Vec<Vec<Point>>,
}

fn entry_lane(b: &mut Builder, len: f64) -> SegmentId {
    b.seg(1, straight([-len, 0.0], 0.0, len))
}

fn layout_straight(rng: &mut ChaCha8Rng) -> Layout {
    let mut b = Builder::new();
    let e = entry_lane(&mut b, 80.0);
    let s = b.seg(2, straight([0.0, 0.0], 0.0, 150.0));
    b.graph.connect(e, s);
    Layout {
        builder: b,
        route: vec![e, s],
        s0: 80.0 + rng.gen_range(-30.0..-5.0),
        profile: Profile::Smooth {
            v: rng.gen_range(6.0..14.0),
            a: rng.gen_range(-0.5..0.5),
        },
        allow_leaders: true,
        socials: vec![],
    }
}

fn layout_curve(rng: &mut ChaCha8Rng) -> Layout {
    let mut b = Builder::new();
    let e = entry_lane(&mut b, 80.0);
    let radius = rng.gen_range(25.0..80.0);
    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let angle = side * rng.gen_range(PI / 3.0..FRAC_PI_2);
    let c = b.seg(2, arc_then_straight([0.0, 0.0], 0.0, radius, angle, 100.0));
    b.graph.connect(e, c);
    Layout {
        builder: b,
        route: vec![e, c],
        s0: 80.0 + rng.gen_range(-25.0..-5.0),
        profile: Profile::Smooth {
            v: rng.gen_range(6.0..12.0),
            a: rng.gen_range(-0.5..0.5),
        },
        allow_leaders: true,
        socials: vec![],
    }
}

fn layout_fork(rng: &mut ChaCha8Rng) -> Layout {
    let mut b = Builder::new();
    let e = entry_lane(&mut b, 80.0);
    let radius = rng.gen_range(15.0..25.0);
    let angle = rng.gen_range(PI / 6.0..PI / 4.0);
    let l = b.seg(2, arc_then_straight([0.0, 0.0], 0.0, radius, angle, 100.0));
    let r = b.seg(3, arc_then_straight([0.0, 0.0], 0.0, radius, -angle, 100.0));
    b.graph.connect(e, l);
    b.graph.connect(e, r);
    let branch = if rng.gen_bool(0.5) { l } else { r };
    let v = rng.gen_range(8.0..14.0);
    Layout {
        builder: b,
        route: vec![e, branch],
        s0: 80.0 + rng.gen_range(-12.0..-3.0),
        profile: Profile::Smooth {
            v,
            a: rng.gen_range(-0.3..0.5),
        },
        allow_leaders: false,
        socials: vec![],
    }
}

fn layout_intersection(rng: &mut ChaCha8Rng) -> Layout {
    let mut b = Builder::new();
    let e = entry_lane(&mut b, 80.0);
    let left = b.seg(2, arc_then_straight([0.0, 0.0], 0.0, 20.0, FRAC_PI_2, 80.0));
    let through = b.seg(3, straight([0.0, 0.0], 0.0, 130.0));
    let right = b.seg(
        4,
        arc_then_straight([0.0, 0.0], 0.0, 12.0, -FRAC_PI_2, 80.0),
    );
    let n = b.seg(5, straight([-80.0, 3.5], 0.0, 80.0));
    let n2 = b.seg(6, straight([0.0, 3.5], 0.0, 130.0));
    for s in [left, through, right] {
        b.graph.connect(e, s);
    }
    b.graph.connect(n, n2);
    b.graph.left.insert(e, n);
    b.graph.right.insert(n, e);
    let branch = [left, through, right][rng.gen_range(0..3)];
    Layout {
        builder: b,
        route: vec![e, branch],
        s0: 80.0 + rng.gen_range(-15.0..-3.0),
        profile: Profile::Smooth {
            v: rng.gen_range(6.0..10.0),
            a: rng.gen_range(-0.3..0.3),
        },
        allow_leaders: false,
        socials: vec![],
    }
}

/// Congested straight lane; returns the layout and the blocker's past.
fn layout_congestion(rng: &mut ChaCha8Rng) -> (Layout, Vec<Point>, f64) {
    let mut base = layout_straight(rng);
    let v = rng.gen_range(8.0..14.0);
    let stop_time = rng.gen_range(1.5..2.5);
    let decel = v / stop_time;
    let gap = rng.gen_range(6.0..9.0);
    let blocker_s = base.s0 + v * stop_time / 2.0 + gap;
    let path = PathLine::new(base.builder.nodes(&base.route));
    let crawl = rng.gen_range(0.0..0.5);
    let lat = rng.gen_range(-0.3..0.3);
    let blocker: Vec<Point> = (-(TP as i32 - 1)..=0)
        .map(|t| path.at(blocker_s + crawl * t as f64 * DT, lat))
        .collect();
    base.profile = Profile::Brake { v, decel };
    base.allow_leaders = false;
    (base, blocker, v)
}

fn far_agent(rng: &mut ChaCha8Rng, anchor: Point) -> Vec<Point> {
    let ang = rng.gen_range(-PI..PI);
    let r = rng.gen_range(20.0..45.0);
    let start = [anchor[0] + r * ang.cos(), anchor[1] + r * ang.sin()];
    let hd = rng.gen_range(-PI..PI);
    let v = rng.gen_range(0.0..10.0);
    (-(TP as i32 - 1)..=0)
        .map(|t| {
            let d = v * t as f64 * DT;
            [start[0] + d * hd.cos(), start[1] + d * hd.sin()]
        })
        .collect()
}

fn leader(rng: &mut ChaCha8Rng, path: &PathLine, s0: f64, v_target: f64) -> Vec<Point> {
    let ahead = rng.gen_range(25.0..45.0);
    let v = v_target + rng.gen_range(0.5..3.0);
    let lat = rng.gen_range(-0.3..0.3);
    (-(TP as i32 - 1)..=0)
        .map(|t| path.at(s0 + ahead + v * t as f64 * DT, lat))
        .collect()
}

fn finish(
    id: String,
    layout: Layout,
    lateral: &Lateral,
    world: RigidTransform,
    rng: &mut ChaCha8Rng,
) -> Scene {
    let path = PathLine::new(layout.builder.nodes(&layout.route));
    let past = trajectory(
        &path,
        layout.s0,
        layout.profile,
        lateral,
        -(TP as i32 - 1)..=0,
    );
    let future = trajectory(&path, layout.s0, layout.profile, lateral, 1..=TF as i32);
    let mut socials = layout.socials;
    let extra = rng.gen_range(0..=2);
    let v_target = match layout.profile {
        Profile::Smooth { v, .. } | Profile::Brake { v, .. } => v,
    };
    for _ in 0..extra {
        if layout.allow_leaders && rng.gen_bool(0.5) {
            socials.push(leader(rng, &path, layout.s0, v_target));
        } else {
            socials.push(far_agent(rng, past[TP - 1]));
        }
    }
    let mut lanes = layout.builder.graph;
    for seg in &mut lanes.segments {
        seg.nodes = world.map_world(&seg.nodes);
    }
    Scene {
        scene_id: id,
        target_past: world.map_world(&past),
        social_pasts: socials.iter().map(|s| world.map_world(s)).collect(),
        lanes,
        gt_future: Some(world.map_world(&future)),
    }
}

fn random_world(rng: &mut ChaCha8Rng) -> RigidTransform {
    RigidTransform {
        origin: [rng.gen_range(-300.0..300.0), rng.gen_range(-300.0..300.0)],
        theta: rng.gen_range(-PI..PI),
    }
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generates one scene of `template` from `rng`.
pub fn gen_scene(template: Template, id: String, rng: &mut ChaCha8Rng) -> Scene {
    let world = random_world(rng);
    let lateral = Lateral::sample(rng);
    let layout = match template {
        Template::Straight => layout_straight(rng),
        Template::Curve => layout_curve(rng),
        Template::Fork => layout_fork(rng),
        Template::Intersection => layout_intersection(rng),
        Template::Congestion => {
            let (mut l, blocker, _) = layout_congestion(rng);
            l.socials.push(blocker);
            l
        }
    };
    finish(id, layout, &lateral, world, rng)
}

/// `count` scenes following `mix`; identical inputs give identical scenes.
pub fn gen_synthetic(mix: &TemplateMix, count: usize, seed: u64) -> Vec<Scene> {
    let cycle = mix.cycle();
    (0..count)
        .map(|i| {
            let t = cycle[i % cycle.len()];
            let mut rng = scene_rng(seed, i as u64);
            gen_scene(t, format!("{t}-{seed}-{i:05}"), &mut rng)
        })
        .collect()
}

/// Fork scenes as produced by `gen_synthetic` with a fork-only mix, each
/// with the world position the target would reach at the horizon on either
/// branch (left first).
pub fn gen_forks_with_branch_ends(count: usize, seed: u64) -> Vec<(Scene, [Point; 2])> {
    (0..count)
        .map(|i| {
            let mut rng = scene_rng(seed, i as u64);
            let world = random_world(&mut rng);
            let lateral = Lateral::sample(&mut rng);
            let layout = layout_fork(&mut rng);
            let end = |branch: SegmentId| {
                let path = PathLine::new(layout.builder.nodes(&[layout.route[0], branch]));
                let p = path.at(
                    layout.s0 + layout.profile.arc(TF as i32),
                    lateral.at(TF as i32),
                );
                world.to_world(p)
            };
            let ends = [end(2), end(3)];
            let id = format!("{}-{seed}-{i:05}", Template::Fork);
            (finish(id, layout, &lateral, world, &mut rng), ends)
        })
        .collect()
}

/// A congested scene and its free-lane twin: same map, same target past and
/// other agents, but no blocker and a constant-speed future.
pub fn gen_congestion_pair(seed: u64, index: u64) -> (Scene, Scene) {
    let mut rng = scene_rng(seed, index);
    let world = random_world(&mut rng);
    let lateral = Lateral::sample(&mut rng);
    let (layout, blocker, v) = layout_congestion(&mut rng);
    let free_layout = Layout {
        builder: Builder {
            graph: layout.builder.graph.clone(),
        },
        route: layout.route.clone(),
        s0: layout.s0,
        profile: Profile::Smooth { v, a: 0.0 },
        allow_leaders: false,
        socials: vec![],
    };
    let mut jammed = layout;
    jammed.socials.push(blocker);
    let mut rng_a = rng.clone();
    let mut rng_b = rng;
    let a = finish(
        format!("congestion-{seed}-{index:05}"),
        jammed,
        &lateral,
        world,
        &mut rng_a,
    );
    let b = finish(
        format!("free-{seed}-{index:05}"),
        free_layout,
        &lateral,
        world,
        &mut rng_b,
    );
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::to_agent_frame;
    use crate::proposals::{extract_lane_proposals, project};
    use crate::scene::write_scenes;

    fn mix(s: &str) -> TemplateMix {
        s.parse().unwrap()
    }

    #[test]
    fn every_template_yields_valid_scenes() {
        for t in Template::ALL {
            for s in gen_synthetic(&TemplateMix::single(t), 20, 3) {
                s.validate().unwrap();
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let m = mix("straight,curve,fork,intersection,congestion");
        let (mut a, mut b) = (Vec::new(), Vec::new());
        write_scenes(&mut a, &gen_synthetic(&m, 15, 11)).unwrap();
        write_scenes(&mut b, &gen_synthetic(&m, 15, 11)).unwrap();
        assert_eq!(a, b);
        let mut c = Vec::new();
        write_scenes(&mut c, &gen_synthetic(&m, 15, 12)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn unknown_template_is_an_error() {
        assert!(matches!(
            "straight,roundabout".parse::<TemplateMix>(),
            Err(Error::UnknownTemplate(n)) if n == "roundabout"
        ));
    }

    #[test]
    fn mix_cycles_by_weight() {
        let m = mix("straight:2,fork:1");
        let scenes = gen_synthetic(&m, 6, 0);
        let names: Vec<&str> = scenes
            .iter()
            .map(|s| s.scene_id.split('-').next().unwrap())
            .collect();
        assert_eq!(
            names,
            ["straight", "straight", "fork", "straight", "straight", "fork"]
        );
    }

    #[test]
    fn straight_ground_truth_hugs_the_single_proposal() {
        for s in gen_synthetic(&TemplateMix::single(Template::Straight), 30, 5) {
            let n = to_agent_frame(&s);
            let props = extract_lane_proposals(&n.scene, 50, 10).unwrap();
            assert_eq!(props.len(), 1);
            for p in n.scene.gt_future.as_ref().unwrap() {
                let (d, _) = project(&props[0].nodes, *p);
                assert!(d <= 0.3 + 1e-9, "lateral {d}");
            }
        }
    }

    #[test]
    fn fork_branch_ends_match_generated_scenes() {
        let plain = gen_synthetic(&mix("fork"), 6, 4);
        for (i, (s, ends)) in gen_forks_with_branch_ends(6, 4).into_iter().enumerate() {
            assert_eq!(s, plain[i]);
            let gt_end = s.gt_future.as_ref().unwrap()[TF - 1];
            let hit = ends.iter().filter(|e| dist(**e, gt_end) < 1e-9).count();
            assert_eq!(hit, 1, "{}", s.scene_id);
            assert!(dist(ends[0], ends[1]) > 3.0);
        }
    }

    #[test]
    fn fork_branch_choice_is_roughly_fair() {
        let scenes = gen_synthetic(&TemplateMix::single(Template::Fork), 200, 9);
        let left = scenes
            .iter()
            .filter(|s| {
                let n = to_agent_frame(s);
                n.scene.gt_future.as_ref().unwrap()[TF - 1][1] > 0.0
            })
            .count();
        assert!((70..=130).contains(&left), "{left}");
    }

    #[test]
    fn template_proposal_counts() {
        let expect = [
            (Template::Straight, 1),
            (Template::Curve, 1),
            (Template::Fork, 2),
            (Template::Intersection, 4),
            (Template::Congestion, 1),
        ];
        for (t, n) in expect {
            for s in gen_synthetic(&TemplateMix::single(t), 25, 1) {
                let props = extract_lane_proposals(&to_agent_frame(&s).scene, 50, 10).unwrap();
                assert_eq!(props.len(), n, "{t} {}", s.scene_id);
            }
        }
    }

    #[test]
    fn ground_truth_stays_in_corridor() {
        let m = mix("straight,curve,fork,intersection,congestion");
        for s in gen_synthetic(&m, 100, 21) {
            let n = to_agent_frame(&s);
            let props = extract_lane_proposals(&n.scene, 50, 10).unwrap();
            for p in n.scene.gt_future.as_ref().unwrap() {
                let best = props
                    .iter()
                    .flat_map(|pr| pr.nodes.iter())
                    .map(|q| dist(*q, *p))
                    .fold(f64::INFINITY, f64::min);
                assert!(best <= 1.5, "{} off corridor by {best}", s.scene_id);
            }
        }
    }

    #[test]
    fn congestion_pair_shares_past_and_differs_in_future() {
        let (jam, free) = gen_congestion_pair(4, 2);
        assert_eq!(jam.target_past, free.target_past);
        assert_eq!(jam.lanes, free.lanes);
        assert_eq!(jam.social_pasts.len(), free.social_pasts.len() + 1);
        let end_speed = |s: &Scene| {
            let g = s.gt_future.as_ref().unwrap();
            dist(g[TF - 1], g[TF - 11]) / 1.0
        };
        assert!(end_speed(&jam) < 0.5);
        assert!(end_speed(&free) > 7.0);
    }
}
