//! Polyline and kinematic helpers in the BEV plane (meters).

use std::f64::consts::PI;

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Sampling interval of every trajectory, seconds.
pub const DT: f64 = 0.1;

/// Below this displacement a heading is treated as undefined.
const HEADING_MIN_STEP: f64 = 1e-6;

pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Ordered lane-centerline samples; at least two nodes, none coincident.
#[derive(Clone, Debug, PartialEq)]
pub struct Polyline {
    nodes: Vec<Point>,
}

impl Polyline {
    pub fn new(nodes: Vec<Point>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::Degenerate(format!("{} nodes", nodes.len())));
        }
        if let Some(i) = nodes.windows(2).position(|w| dist(w[0], w[1]) <= 1e-9) {
            return Err(Error::Degenerate(format!(
                "nodes {i} and {} coincide",
                i + 1
            )));
        }
        if nodes.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("non-finite coordinate".into()));
        }
        Ok(Polyline { nodes })
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn length(&self) -> f64 {
        self.nodes.windows(2).map(|w| dist(w[0], w[1])).sum()
    }

    pub fn first(&self) -> Point {
        self.nodes[0]
    }

    pub fn last(&self) -> Point {
        self.nodes[self.nodes.len() - 1]
    }
}

/// Resamples to exactly `h` equally spaced nodes, keeping both endpoints.
pub fn resample(poly: &Polyline, h: usize) -> Result<Polyline> {
    resample_points(poly.nodes(), h).and_then(Polyline::new)
}

/// [`resample`] over raw points; tolerates repeated points (e.g. where two
/// lane segments are joined end to start).
///
/// Nodes are placed by stepping a fixed chord length along the path; the
/// chord is solved by bisection so the last step lands on the final point.
/// Spacing is therefore equal in Euclidean distance, and on a path that is
/// already equally spaced the nodes are reproduced.
pub fn resample_points(pts: &[Point], h: usize) -> Result<Vec<Point>> {
    if h < 2 {
        return Err(Error::Degenerate(format!("cannot resample to {h} nodes")));
    }
    let pts: Vec<Point> = {
        let mut v = pts.to_vec();
        v.dedup_by(|a, b| dist(*a, *b) <= 1e-12);
        v
    };
    let total: f64 = pts.windows(2).map(|w| dist(w[0], w[1])).sum();
    if pts.len() < 2 || total <= 1e-9 {
        return Err(Error::Degenerate("zero-length polyline".into()));
    }
    let end = pts[pts.len() - 1];
    if pts.len() == 2 {
        // exact linear interpolation on a single segment
        let (a, b) = (pts[0], end);
        let mut out: Vec<Point> = (0..h - 1)
            .map(|i| {
                let f = i as f64 / (h - 1) as f64;
                [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]
            })
            .collect();
        out.push(end);
        return Ok(out);
    }
    let (mut lo, mut hi) = (0.0, total / (h - 1) as f64);
    let mut best = None;
    for _ in 0..200 {
        let c = 0.5 * (lo + hi);
        match chord_walk(&pts, c, h - 1) {
            Some(nodes) => {
                best = Some(nodes);
                lo = c;
            }
            None => hi = c,
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    let mut nodes = best.ok_or_else(|| Error::Degenerate("chord search failed".into()))?;
    nodes.push(end);
    Ok(nodes)
}

/// Takes `steps` chord steps of length `c` from the first point. Returns the
/// visited nodes (excluding the final step) if all steps stay on the path.
fn chord_walk(pts: &[Point], c: f64, steps: usize) -> Option<Vec<Point>> {
    let mut out = Vec::with_capacity(steps + 1);
    let mut cur = pts[0];
    let mut seg = 0;
    let mut f = 0.0;
    out.push(cur);
    for k in 0..steps {
        let (next, nseg, nf) = chord_step(pts, cur, seg, f, c)?;
        cur = next;
        seg = nseg;
        f = nf;
        if k + 1 < steps {
            out.push(cur);
        }
    }
    Some(out)
}

/// First point past `(seg, f)` along the path at distance `c` from `from`.
fn chord_step(
    pts: &[Point],
    from: Point,
    seg: usize,
    f: f64,
    c: f64,
) -> Option<(Point, usize, f64)> {
    for s in seg..pts.len() - 1 {
        let (a, b) = (pts[s], pts[s + 1]);
        if dist(b, from) < c {
            continue;
        }
        // |a + t(b−a) − from|² = c², larger root
        let d = [b[0] - a[0], b[1] - a[1]];
        let m = [a[0] - from[0], a[1] - from[1]];
        let qa = d[0] * d[0] + d[1] * d[1];
        let qb = 2.0 * (d[0] * m[0] + d[1] * m[1]);
        let qc = m[0] * m[0] + m[1] * m[1] - c * c;
        let disc = (qb * qb - 4.0 * qa * qc).max(0.0);
        let t = ((-qb + disc.sqrt()) / (2.0 * qa)).clamp(0.0, 1.0);
        let t = if s == seg { t.max(f) } else { t };
        return Some(([a[0] + t * d[0], a[1] + t * d[1]], s, t));
    }
    None
}

/// Index of the node closest to `p` and its distance; ties go to the
/// smallest index.
pub fn nearest_node(nodes: &[Point], p: Point) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, &n) in nodes.iter().enumerate() {
        let d = dist(n, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Heading of the displacement ending at `t`, in `(−π, π]`.
///
/// Near-zero displacements fall back to the most recent valid heading, and
/// to `0` if none exists.
pub fn heading(traj: &[Point], t: usize) -> f64 {
    let t = t.min(traj.len().saturating_sub(1));
    for end in (1..=t).rev() {
        let d = sub(traj[end], traj[end - 1]);
        if d[0].hypot(d[1]) >= HEADING_MIN_STEP {
            return wrap_angle(d[1].atan2(d[0]));
        }
    }
    0.0
}

/// Tangent direction at node `h`: segment `h→h+1`, or `h−1→h` at the end.
pub fn lane_direction(nodes: &[Point], h: usize) -> f64 {
    let (a, b) = if h + 1 < nodes.len() {
        (nodes[h], nodes[h + 1])
    } else {
        (nodes[h - 1], nodes[h])
    };
    wrap_angle((b[1] - a[1]).atan2(b[0] - a[0]))
}

/// Extrapolated future positions of one agent.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub points: Vec<Point>,
    pub dt: f64,
}

/// Constant-acceleration extrapolation from the last three past samples.
///
/// Velocity and acceleration are per-step finite differences. A decelerating
/// agent stops where its velocity would reverse and holds that point. With
/// two samples this is constant velocity; with one, the agent holds.
pub fn const_accel_rollout(past: &[Point], horizon: usize) -> Result<Rollout> {
    let n = past.len();
    if n == 0 {
        return Err(Error::Invalid("rollout of an empty trajectory".into()));
    }
    let p0 = past[n - 1];
    let (v0, a0) = match n {
        1 => ([0.0, 0.0], [0.0, 0.0]),
        2 => (sub(past[1], past[0]), [0.0, 0.0]),
        _ => {
            let v = sub(past[n - 1], past[n - 2]);
            let vp = sub(past[n - 2], past[n - 3]);
            (v, sub(v, vp))
        }
    };
    let speed_sq = v0[0] * v0[0] + v0[1] * v0[1];
    let along = v0[0] * a0[0] + v0[1] * a0[1];
    // time (in steps) at which the velocity stops pointing forward
    let stop = if speed_sq == 0.0 {
        Some(0.0)
    } else if along < 0.0 {
        Some(-speed_sq / along)
    } else {
        None
    };
    let at = |t: f64| -> Point {
        [
            p0[0] + v0[0] * t + 0.5 * a0[0] * t * t,
            p0[1] + v0[1] * t + 0.5 * a0[1] * t * t,
        ]
    };
    let points = (1..=horizon)
        .map(|k| {
            let t = k as f64;
            match stop {
                Some(ts) if t >= ts => at(ts),
                _ => at(t),
            }
        })
        .collect();
    Ok(Rollout { points, dt: DT })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn line(n: usize, step: f64) -> Vec<Point> {
        (0..n).map(|i| [i as f64 * step, 0.0]).collect()
    }

    #[test]
    fn straight_segment_resamples_evenly() {
        let p = Polyline::new(vec![[0.0, 0.0], [10.0, 0.0]]).unwrap();
        let r = resample(&p, 6).unwrap();
        let xs: Vec<f64> = r.nodes().iter().map(|n| n[0]).collect();
        for (x, want) in xs.iter().zip([0.0, 2.0, 4.0, 6.0, 8.0, 10.0]) {
            assert!((x - want).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_is_idempotent_on_equal_spacing() {
        let pts: Vec<Point> = (0..37)
            .map(|i| {
                let t = i as f64 * 0.1;
                [t * 7.0, (t * 1.3).sin() * 4.0]
            })
            .collect();
        let once = resample(&Polyline::new(pts).unwrap(), 50).unwrap();
        let twice = resample(&once, 50).unwrap();
        for (a, b) in once.nodes().iter().zip(twice.nodes()) {
            assert!(dist(*a, *b) < 1e-6);
        }
    }

    #[test]
    fn quarter_circle_nodes_stay_on_radius() {
        // dense chordal sampling keeps the sagitta far below 1e-6
        let dense: Vec<Point> = (0..=20000)
            .map(|i| {
                let a = FRAC_PI_2 * i as f64 / 20000.0;
                [10.0 * a.cos(), 10.0 * a.sin()]
            })
            .collect();
        let r = resample(&Polyline::new(dense).unwrap(), 11).unwrap();
        for n in r.nodes() {
            assert!((n[0].hypot(n[1]) - 10.0).abs() < 1e-6);
        }
        let gaps: Vec<f64> = r.nodes().windows(2).map(|w| dist(w[0], w[1])).collect();
        for g in &gaps {
            assert!((g - gaps[0]).abs() / gaps[0] < 1e-6);
        }
    }

    #[test]
    fn resample_rejects_degenerate_input() {
        assert!(Polyline::new(vec![[1.0, 1.0], [1.0, 1.0]]).is_err());
        assert!(resample_points(&[[1.0, 1.0], [1.0, 1.0]], 5).is_err());
        assert!(resample_points(&[[0.0, 0.0], [1.0, 0.0]], 1).is_err());
    }

    #[test]
    fn resample_preserves_arc_length_on_smooth_curves() {
        let dense: Vec<Point> = (0..=4000)
            .map(|i| {
                let t = i as f64 / 4000.0 * 3.0;
                [30.0 * t, 8.0 * t.sin()]
            })
            .collect();
        let p = Polyline::new(dense).unwrap();
        for h in [20, 50, 100] {
            let r = resample(&p, h).unwrap();
            assert!((r.length() - p.length()).abs() / p.length() < 1e-3);
        }
    }

    #[test]
    fn nearest_node_examples() {
        let nodes = line(6, 2.0);
        let (i, d) = nearest_node(&nodes, [3.1, 1.0]);
        assert_eq!(i, 2);
        assert!((d - (0.81f64 + 1.0).sqrt()).abs() < 1e-12);
        assert_eq!(nearest_node(&nodes, [0.0, 0.0]), (0, 0.0));
        assert_eq!(nearest_node(&nodes, [3.0, 0.5]).0, 1);
    }

    #[test]
    fn heading_examples() {
        assert_eq!(heading(&line(3, 1.0), 2), 0.0);
        let up = vec![[0.0, 0.0], [0.0, 1.0]];
        assert!((heading(&up, 1) - FRAC_PI_2).abs() < 1e-15);
        assert_eq!(heading(&[[2.0, 2.0]; 5], 4), 0.0);
        // stationary tail reuses the last valid heading
        let stop = vec![[0.0, 0.0], [0.0, -1.0], [0.0, -1.0], [0.0, -1.0]];
        assert!((heading(&stop, 3) + FRAC_PI_2).abs() < 1e-15);
        // −π maps to +π
        let back = vec![[0.0, 0.0], [-1.0, 0.0]];
        assert!((heading(&back, 1) - PI).abs() < 1e-15);
    }

    #[test]
    fn lane_direction_examples() {
        let straight = line(5, 1.0);
        for h in 0..5 {
            assert_eq!(lane_direction(&straight, h), 0.0);
        }
        let bend = vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [2.0, 1.0], [2.0, 2.0]];
        assert!((lane_direction(&bend, 2) - lane_direction(&bend, 1) - FRAC_PI_2).abs() < 1e-12);

        // arc: tangent increments equal the analytic central-angle step
        let step = 0.05;
        let arc: Vec<Point> = (0..30)
            .map(|i| {
                let a = i as f64 * step;
                [a.cos() * 20.0, a.sin() * 20.0]
            })
            .collect();
        for h in 0..27 {
            let inc = lane_direction(&arc, h + 1) - lane_direction(&arc, h);
            assert!((inc - step).abs() < 1e-12);
        }
    }

    #[test]
    fn rollout_examples() {
        let past: Vec<Point> = (0..20).map(|i| [i as f64, 0.0]).collect();
        let r = const_accel_rollout(&past, 30).unwrap();
        assert_eq!(r.points.len(), 30);
        for (k, p) in r.points.iter().enumerate() {
            assert_eq!(p[0], 19.0 + (k + 1) as f64);
        }
        let r = const_accel_rollout(&[[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]], 30).unwrap();
        assert_eq!(r.points[0], [5.5, 0.0]);
        let r = const_accel_rollout(&[[4.0, -2.0]; 20], 30).unwrap();
        assert!(r.points.iter().all(|p| *p == [4.0, -2.0]));
        assert_eq!(r.dt, 0.1);
    }

    #[test]
    fn decelerating_rollout_never_reverses() {
        let r = const_accel_rollout(&[[8.5, 0.0], [9.0, 0.0], [10.0, 0.0]], 30).unwrap();
        // v0 = 1, a0 = -0.5: stops at t=2 at x = 10 + 2 - 1 = 11
        let r2 = const_accel_rollout(&[[7.5, 0.0], [9.0, 0.0], [10.0, 0.0]], 30).unwrap();
        assert!(r2.points.windows(2).all(|w| w[1][0] >= w[0][0]));
        assert!((r2.points.last().unwrap()[0] - 11.0).abs() < 1e-12);
        assert!(r.points.windows(2).all(|w| w[1][0] >= w[0][0]));
    }

    #[test]
    fn rollout_fallbacks() {
        let r = const_accel_rollout(&[[0.0, 0.0], [2.0, 1.0]], 3).unwrap();
        assert_eq!(r.points, vec![[4.0, 2.0], [6.0, 3.0], [8.0, 4.0]]);
        let r = const_accel_rollout(&[[1.0, 1.0]], 2).unwrap();
        assert_eq!(r.points, vec![[1.0, 1.0]; 2]);
        assert!(const_accel_rollout(&[], 2).is_err());
    }
}
