//! Social-to-lane fusion: related agents' features are summed into the lane
//! nodes they come near, then the nodes exchange information along the lane.

use std::cmp::Ordering;

use lanepred_autodiff::{ParamStore, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::encoders::POS_SCALE;
use crate::error::Result;
use crate::geometry::{dist, Point, Rollout};
use crate::nn::{Conv1d, Mlp};

/// Per (node, agent) relatedness for one proposal.
#[derive(Clone, Debug, PartialEq)]
pub struct RelatednessMap {
    pub num_agents: usize,
    /// `H×M`, row-major
    pub min_dist: Vec<f64>,
    pub related: Vec<bool>,
}

impl RelatednessMap {
    pub fn is_related(&self, h: usize, j: usize) -> bool {
        self.related[h * self.num_agents + j]
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let m = self.num_agents.max(1);
        self.related
            .iter()
            .enumerate()
            .filter(|(_, &r)| r)
            .map(move |(i, _)| (i / m, i % m))
    }
}

/// A node is related to an agent when some rollout point lies strictly
/// closer than `threshold`.
pub fn relatedness(nodes: &[Point], rollouts: &[Rollout], threshold: f64) -> RelatednessMap {
    let m = rollouts.len();
    let mut min_dist = Vec::with_capacity(nodes.len() * m);
    for &n in nodes {
        for r in rollouts {
            let d = r
                .points
                .iter()
                .map(|&p| dist(p, n))
                .fold(f64::INFINITY, f64::min);
            min_dist.push(d);
        }
    }
    let related = min_dist.iter().map(|&d| d < threshold).collect();
    RelatednessMap {
        num_agents: m,
        min_dist,
        related,
    }
}

/// Agent indices sorted by their past coordinates, so any permutation of the
/// same agents yields the same summation order.
pub fn canonical_order(pasts: &[Vec<Point>]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pasts.len()).collect();
    idx.sort_by(|&a, &b| {
        for (p, q) in pasts[a].iter().zip(&pasts[b]) {
            for c in 0..2 {
                let o = p[c].total_cmp(&q[c]);
                if o != Ordering::Equal {
                    return o;
                }
            }
        }
        Ordering::Equal
    });
    idx
}

#[derive(Clone, Debug)]
pub struct S2l {
    pub dist: Mlp,
    pub agg: Mlp,
    pub res: Mlp,
    pub mp: [Conv1d; 2],
}

impl S2l {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize) -> Self {
        let dd = d / 4;
        S2l {
            dist: Mlp::new(ps, rng, "s2l.dist", [2, dd, dd]),
            agg: Mlp::new(ps, rng, "s2l.agg", [d + dd + d, d, d]),
            res: Mlp::new(ps, rng, "s2l.res", [d, d, d]),
            mp: [
                Conv1d::new(ps, rng, "s2l.mp0", 3, d, d),
                Conv1d::new(ps, rng, "s2l.mp1", 3, d, d),
            ],
        }
    }

    /// `φ_res(l_h + Σ_j φ_agg(l_h ‖ dist ‖ S_j))` for every node of one lane.
    ///
    /// `order` is the agent summation order; `agent_pos` the agents' current
    /// positions. Returns `H×d`.
    #[allow(clippy::too_many_arguments)]
    pub fn fuse(
        &self,
        t: &mut Tape,
        ps: &ParamStore,
        lane: Var,
        nodes: &[Point],
        social: Option<Var>,
        rel: &RelatednessMap,
        order: &[usize],
        agent_pos: &[Point],
    ) -> Result<Var> {
        let h = nodes.len();
        let mut pair_nodes = Vec::new();
        let mut pair_agents = Vec::new();
        let mut diffs = Vec::new();
        if social.is_some() {
            for (n, node) in nodes.iter().enumerate() {
                for &j in order {
                    if rel.is_related(n, j) {
                        pair_nodes.push(n);
                        pair_agents.push(j);
                        diffs.push((node[0] - agent_pos[j][0]) / POS_SCALE);
                        diffs.push((node[1] - agent_pos[j][1]) / POS_SCALE);
                    }
                }
            }
        }
        let pre = match social {
            Some(s) if !pair_nodes.is_empty() => {
                let p = pair_nodes.len();
                let dv = t.constant(Tensor::matrix(p, 2, diffs));
                let de = self.dist.forward(t, ps, dv)?;
                let ln = t.select_rows(lane, &pair_nodes)?;
                let sj = t.select_rows(s, &pair_agents)?;
                let cat = t.concat_cols(&[ln, de, sj])?;
                let msg = self.agg.forward(t, ps, cat)?;
                let summed = t.scatter_rows(msg, pair_nodes, h)?;
                t.add(lane, summed)?
            }
            _ => lane,
        };
        self.res.forward(t, ps, pre)
    }

    /// Two same-padded convolutions along the node axis with a residual add.
    pub fn message_pass(&self, t: &mut Tape, ps: &ParamStore, fused: Var) -> Result<Var> {
        let y = self.mp[0].forward(t, ps, fused)?;
        let y = t.relu(y);
        let y = self.mp[1].forward(t, ps, y)?;
        Ok(t.add(fused, y)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{const_accel_rollout, DT};
    use rand::SeedableRng;

    fn lane() -> Vec<Point> {
        (0..50).map(|i| [i as f64 * 2.0, 0.0]).collect()
    }

    fn hold(p: Point) -> Rollout {
        Rollout {
            points: vec![p; 30],
            dt: DT,
        }
    }

    #[test]
    fn offset_agent_relates_to_nothing() {
        let past: Vec<Point> = (0..20).map(|i| [i as f64, 20.0]).collect();
        let r = const_accel_rollout(&past, 30).unwrap();
        let rel = relatedness(&lane(), &[r], 7.5);
        assert_eq!(rel.pairs().count(), 0);
    }

    #[test]
    fn stopped_agent_relates_to_nodes_within_threshold() {
        let rel = relatedness(&lane(), &[hold([41.0, 0.0])], 7.5);
        let got: Vec<usize> = rel.pairs().map(|(h, _)| h).collect();
        let want: Vec<usize> = (0..50)
            .filter(|&h| (h as f64 * 2.0 - 41.0).abs() < 7.5)
            .collect();
        assert_eq!(got, want);
        let tiny = relatedness(&lane(), &[hold([40.0, 0.0])], 1e-12);
        assert_eq!(tiny.pairs().collect::<Vec<_>>(), vec![(20, 0)]);
    }

    #[test]
    fn raising_threshold_never_shrinks_related_sets() {
        let rolls = [hold([10.3, 3.0]), hold([60.0, -5.5])];
        let mut prev = relatedness(&lane(), &rolls, 0.5);
        for th in [1.0, 4.0, 7.5, 12.0] {
            let next = relatedness(&lane(), &rolls, th);
            for (a, b) in prev.related.iter().zip(&next.related) {
                assert!(!a || *b);
            }
            prev = next;
        }
    }

    #[test]
    fn canonical_order_ignores_input_permutation() {
        let a = vec![[1.0, 2.0]; 3];
        let b = vec![[0.0, 5.0]; 3];
        let c = vec![[1.0, -1.0]; 3];
        let o1 = canonical_order(&[a.clone(), b.clone(), c.clone()]);
        assert_eq!(o1, vec![1, 2, 0]);
        let o2 = canonical_order(&[c, a, b]);
        assert_eq!(o2, vec![2, 0, 1]);
    }

    #[test]
    fn no_related_agents_reduces_to_residual_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamStore::new();
        let s2l = S2l::new(&mut ps, &mut rng, 8);
        let nodes = lane();
        let rel = relatedness(&nodes, &[hold([0.0, 30.0])], 7.5);
        let mut t = Tape::new();
        let feats = t.constant(Tensor::filled(50, 8, 0.3));
        let soc = t.constant(Tensor::filled(1, 8, 1.0));
        let a = s2l
            .fuse(
                &mut t,
                &ps,
                feats,
                &nodes,
                Some(soc),
                &rel,
                &[0],
                &[[0.0, 30.0]],
            )
            .unwrap();
        let b = s2l.res.forward(&mut t, &ps, feats).unwrap();
        assert_eq!(t.value(a), t.value(b));
    }

    #[test]
    fn zero_message_weights_pass_features_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ps = ParamStore::new();
        let s2l = S2l::new(&mut ps, &mut rng, 8);
        for c in &s2l.mp {
            for id in [c.w, c.b] {
                ps.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(
            5,
            8,
            (0..40).map(|v| v as f64 * 0.1).collect(),
        ));
        let y = s2l.message_pass(&mut t, &ps, x).unwrap();
        assert_eq!(t.value(x), t.value(y));
    }

    #[test]
    fn message_passing_reaches_two_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamStore::new();
        let s2l = S2l::new(&mut ps, &mut rng, 8);
        let base: Vec<f64> = (0..80)
            .map(|v| ((v * 7919) % 13) as f64 * 0.1 - 0.6)
            .collect();
        let mut bumped = base.clone();
        bumped[5 * 8 + 3] += 1.0;
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(10, 8, base));
        let b = t.constant(Tensor::matrix(10, 8, bumped));
        let ya = s2l.message_pass(&mut t, &ps, a).unwrap();
        let yb = s2l.message_pass(&mut t, &ps, b).unwrap();
        for r in 0..10 {
            let same = t.value(ya).row_slice(r) == t.value(yb).row_slice(r);
            assert_eq!(same, !(3..=7).contains(&r), "row {r}");
        }
    }
}
