//! Trajectory and lane-node feature extractors.

use lanepred_autodiff::{ParamStore, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{lane_direction, Point};
use crate::nn::{Conv1d, GruCell, MultiScaleConv};

/// Positions are divided by this before entering any network.
pub const POS_SCALE: f64 = 10.0;

/// Per-step channels `(x/S, y/S, dx, dy)`; the first step has zero displacement.
pub fn motion_channels(traj: &[Point]) -> Tensor {
    let mut data = Vec::with_capacity(traj.len() * 4);
    for (t, p) in traj.iter().enumerate() {
        let d = if t == 0 {
            [0.0, 0.0]
        } else {
            [p[0] - traj[t - 1][0], p[1] - traj[t - 1][1]]
        };
        data.extend_from_slice(&[p[0] / POS_SCALE, p[1] / POS_SCALE, d[0], d[1]]);
    }
    Tensor::matrix(traj.len(), 4, data)
}

/// Per-node channels `(x/S, y/S, sin θ, cos θ)` with θ the node tangent.
pub fn lane_channels(nodes: &[Point]) -> Tensor {
    let mut data = Vec::with_capacity(nodes.len() * 4);
    for (h, p) in nodes.iter().enumerate() {
        let th = lane_direction(nodes, h);
        data.extend_from_slice(&[p[0] / POS_SCALE, p[1] / POS_SCALE, th.sin(), th.cos()]);
    }
    Tensor::matrix(nodes.len(), 4, data)
}

#[derive(Clone, Debug)]
pub struct TargetEncoder {
    pub conv: MultiScaleConv,
}

impl TargetEncoder {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize) -> Self {
        TargetEncoder {
            conv: MultiScaleConv::new(ps, rng, "target", 4, d),
        }
    }

    /// `Tp×d` motion feature.
    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, past: &[Point]) -> Result<Var> {
        let x = t.constant(motion_channels(past));
        self.conv.forward(t, ps, x)
    }
}

#[derive(Clone, Debug)]
pub struct SocialEncoder {
    pub conv: Conv1d,
    pub gru: GruCell,
    pub d: usize,
}

impl SocialEncoder {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize) -> Self {
        SocialEncoder {
            conv: Conv1d::new(ps, rng, "social.conv", 3, 4, d),
            gru: GruCell::new(ps, rng, "social.gru", d, d),
            d,
        }
    }

    /// `M×d` final GRU states, one row per agent, or `None` when there are no agents.
    pub fn forward(
        &self,
        t: &mut Tape,
        ps: &ParamStore,
        pasts: &[Vec<Point>],
    ) -> Result<Option<Var>> {
        if pasts.is_empty() {
            return Ok(None);
        }
        let len = pasts[0].len();
        let mut convs = Vec::with_capacity(pasts.len());
        for p in pasts {
            let x = t.constant(motion_channels(p));
            let y = self.conv.forward(t, ps, x)?;
            convs.push(t.relu(y));
        }
        let all = t.concat_rows(&convs)?;
        let mut h = t.constant(Tensor::zeros(pasts.len(), self.d));
        for step in 0..len {
            let idx: Vec<usize> = (0..pasts.len()).map(|j| j * len + step).collect();
            let x = t.select_rows(all, &idx)?;
            h = self.gru.step(t, ps, x, h)?;
        }
        Ok(Some(h))
    }
}

#[derive(Clone, Debug)]
pub struct LaneEncoder {
    pub conv: MultiScaleConv,
}

impl LaneEncoder {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize) -> Self {
        LaneEncoder {
            conv: MultiScaleConv::new(ps, rng, "lane", 4, d),
        }
    }

    /// `H×d` node features for one proposal.
    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, nodes: &[Point]) -> Result<Var> {
        let x = t.constant(lane_channels(nodes));
        self.conv.forward(t, ps, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn past(seed: f64) -> Vec<Point> {
        (0..20)
            .map(|i| [i as f64 * 0.9 - 17.0, seed * (i as f64 * 0.3).sin()])
            .collect()
    }

    #[test]
    fn target_output_shape_and_receptive_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::new();
        let enc = TargetEncoder::new(&mut ps, &mut rng, 16);
        let a = past(1.0);
        let mut b = a.clone();
        b[0][1] += 0.5;
        let mut t = Tape::new();
        let ya = enc.forward(&mut t, &ps, &a).unwrap();
        let yb = enc.forward(&mut t, &ps, &b).unwrap();
        assert_eq!(t.value(ya).shape(), &[20, 16]);
        // point 0 feeds channels at rows 0 and 1 (through the displacement),
        // and the widest kernel reaches three rows further
        for r in 0..20 {
            let same = t.value(ya).row_slice(r) == t.value(yb).row_slice(r);
            assert_eq!(same, r > 4, "row {r}");
        }
    }

    #[test]
    fn zero_weights_and_input_give_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamStore::new();
        let enc = TargetEncoder::new(&mut ps, &mut rng, 8);
        ps.map_values(|v| *v = 0.0);
        let mut t = Tape::new();
        let y = enc.forward(&mut t, &ps, &vec![[0.0, 0.0]; 20]).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn social_rows_follow_agent_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::new();
        let enc = SocialEncoder::new(&mut ps, &mut rng, 8);
        let mut t = Tape::new();
        assert!(enc.forward(&mut t, &ps, &[]).unwrap().is_none());
        let agents = vec![past(1.0), past(-2.0), past(0.5)];
        let y = enc.forward(&mut t, &ps, &agents).unwrap().unwrap();
        let rev: Vec<_> = agents.iter().rev().cloned().collect();
        let z = enc.forward(&mut t, &ps, &rev).unwrap().unwrap();
        assert_eq!(t.value(y).shape(), &[3, 8]);
        for j in 0..3 {
            assert_eq!(t.value(y).row_slice(j), t.value(z).row_slice(2 - j));
        }
    }

    #[test]
    fn lane_encoding_is_direction_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamStore::new();
        let enc = LaneEncoder::new(&mut ps, &mut rng, 8);
        let nodes: Vec<Point> = (0..10).map(|i| [i as f64 * 2.0 - 9.0, 0.0]).collect();
        let rev: Vec<Point> = nodes.iter().rev().copied().collect();
        let mut t = Tape::new();
        let a = enc.forward(&mut t, &ps, &nodes).unwrap();
        let b = enc.forward(&mut t, &ps, &rev).unwrap();
        assert_eq!(t.value(a).shape(), &[10, 8]);
        assert_ne!(t.value(a).row_slice(0), t.value(b).row_slice(9));
    }
}
