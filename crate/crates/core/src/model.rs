//! The full predictor: encoders, social-to-lane fusion, recurrent lane
//! attention and the two selector heads.

use lanepred_autodiff::{ParamStore, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::encoders::{LaneEncoder, SocialEncoder, TargetEncoder};
use crate::error::Result;
use crate::frame::{to_agent_frame, RigidTransform};
use crate::geometry::{const_accel_rollout, Point};
use crate::nn::Mlp;
use crate::proposals::extract_lane_proposals;
use crate::rla::{Decoded, LaneMemory, Rla, RlaState, StepOut};
use crate::s2l::{canonical_order, relatedness, RelatednessMap, S2l};
use crate::scene::{Scene, TF};
use crate::selectors::{
    argmax, combine_and_pick, entropy, flat_points, lane_labels, softmax, total_loss, LossParts,
    Pick,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub h: usize,
    pub max_n: usize,
    pub k: usize,
    pub s2l_threshold: f64,
}

impl From<&ExperimentConfig> for ModelConfig {
    fn from(c: &ExperimentConfig) -> Self {
        ModelConfig {
            d: c.d,
            h: c.h,
            max_n: c.max_n,
            k: c.k,
            s2l_threshold: c.s2l_threshold,
        }
    }
}

/// Everything about a scene that does not depend on the parameters.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub scene_id: String,
    pub transform: RigidTransform,
    pub past: Vec<Point>,
    pub social: Vec<Vec<Point>>,
    pub agent_pos: Vec<Point>,
    pub order: Vec<usize>,
    pub lanes: Vec<Vec<Point>>,
    pub relatedness: Vec<RelatednessMap>,
    pub gt: Option<Vec<Point>>,
    pub lane_label: Option<Vec<f64>>,
}

impl Prepared {
    pub fn num_lanes(&self) -> usize {
        self.lanes.len()
    }

    /// Lane the training decoder follows.
    pub fn likely_lane(&self) -> Option<usize> {
        self.lane_label.as_ref().map(|l| argmax(l))
    }

    /// Why a scene gives no lane-classification signal, if it does not.
    pub fn skip_reason(&self) -> Option<String> {
        let label = self.lane_label.as_ref()?;
        let n = label.len();
        if n >= 2 && entropy(label) > (n as f64).ln() - 0.01 {
            return Some(format!(
                "lane label entropy {:.4} is near ln {n}",
                entropy(label)
            ));
        }
        None
    }
}

pub fn prepare(scene: &Scene, cfg: &ModelConfig) -> Result<Prepared> {
    scene.validate()?;
    let norm = to_agent_frame(scene);
    let s = &norm.scene;
    let lanes: Vec<Vec<Point>> = extract_lane_proposals(s, cfg.h, cfg.max_n)?
        .into_iter()
        .map(|p| p.nodes)
        .collect();
    let rollouts = s
        .social_pasts
        .iter()
        .map(|p| const_accel_rollout(p, TF))
        .collect::<Result<Vec<_>>>()?;
    let rel = lanes
        .iter()
        .map(|l| relatedness(l, &rollouts, cfg.s2l_threshold))
        .collect();
    let lane_label = s.gt_future.as_ref().map(|gt| lane_labels(&lanes, gt));
    Ok(Prepared {
        scene_id: s.scene_id.clone(),
        transform: norm.transform,
        past: s.target_past.clone(),
        agent_pos: s.social_pasts.iter().map(|p| p[p.len() - 1]).collect(),
        order: canonical_order(&s.social_pasts),
        social: s.social_pasts.clone(),
        lanes,
        relatedness: rel,
        gt: s.gt_future.clone(),
        lane_label,
    })
}

#[derive(Clone, Debug)]
pub struct JalMtp {
    pub cfg: ModelConfig,
    pub target: TargetEncoder,
    pub social: SocialEncoder,
    pub lane: LaneEncoder,
    pub s2l: S2l,
    pub rla: Rla,
    pub lane_sel: Mlp,
    pub traj_sel: Mlp,
}

/// Output of the encoding half for every lane of a scene.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub instance_lanes: Vec<Var>,
    pub mem: LaneMemory,
    pub state: RlaState,
    pub steps: Vec<StepOut>,
    /// `1×N`
    pub lane_logits: Var,
}

/// Per-scene inference result in both frames.
#[derive(Clone, Debug)]
pub struct Inference {
    pub scene_id: String,
    pub lane_probs: Vec<f64>,
    /// per lane, softmax over its K heads
    pub traj_probs: Vec<Vec<f64>>,
    /// every decoded trajectory, agent frame, indexed `[lane][head]`
    pub candidates: Vec<Vec<Vec<Point>>>,
    pub pick: Pick,
    /// picked trajectories in world coordinates
    pub world: Vec<Vec<Point>>,
    /// sum of the attention weights of every window visited
    pub attention_sums: Vec<f64>,
}

fn window_sums(t: &Tape, steps: &[StepOut], out: &mut Vec<f64>) {
    for s in steps {
        let w = t.value(s.weights).data();
        let mut at = 0;
        for &(lo, hi) in &s.windows {
            let len = hi - lo + 1;
            out.push(w[at..at + len].iter().sum());
            at += len;
        }
    }
}

impl JalMtp {
    pub fn new(cfg: ModelConfig, seed: u64) -> (Self, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let d = cfg.d;
        let m = JalMtp {
            cfg,
            target: TargetEncoder::new(&mut ps, &mut rng, d),
            social: SocialEncoder::new(&mut ps, &mut rng, d),
            lane: LaneEncoder::new(&mut ps, &mut rng, d),
            s2l: S2l::new(&mut ps, &mut rng, d),
            rla: Rla::new(&mut ps, &mut rng, d, cfg.k),
            lane_sel: Mlp::new(&mut ps, &mut rng, "lane_sel", [d, d, 1]),
            traj_sel: Mlp::new(&mut ps, &mut rng, "traj_sel", [2 * TF + d, d, 1]),
        };
        (m, ps)
    }

    /// Instance-level lanes, one `H×d` node sequence per proposal.
    pub fn instance_lanes(
        &self,
        t: &mut Tape,
        ps: &ParamStore,
        prep: &Prepared,
    ) -> Result<Vec<Var>> {
        let social = self.social.forward(t, ps, &prep.social)?;
        let mut out = Vec::with_capacity(prep.lanes.len());
        for (nodes, rel) in prep.lanes.iter().zip(&prep.relatedness) {
            let lf = self.lane.forward(t, ps, nodes)?;
            let fused =
                self.s2l
                    .fuse(t, ps, lf, nodes, social, rel, &prep.order, &prep.agent_pos)?;
            out.push(self.s2l.message_pass(t, ps, fused)?);
        }
        Ok(out)
    }

    pub fn encode(&self, t: &mut Tape, ps: &ParamStore, prep: &Prepared) -> Result<Encoded> {
        let motion = self.target.forward(t, ps, &prep.past)?;
        let instance_lanes = self.instance_lanes(t, ps, prep)?;
        let mem = self.rla.memory(t, ps, &instance_lanes, &prep.lanes)?;
        let (state, steps) = self.rla.encode(t, ps, &mem, &prep.past, motion)?;
        let s = self.lane_sel.forward(t, ps, state.next[1])?;
        let lane_logits = t.transpose(s);
        Ok(Encoded {
            instance_lanes,
            mem,
            state,
            steps,
            lane_logits,
        })
    }

    pub fn decode(
        &self,
        t: &mut Tape,
        ps: &ParamStore,
        enc: &Encoded,
        rows: &[(usize, usize)],
    ) -> Result<Decoded> {
        self.rla.decode(t, ps, &enc.mem, &enc.state, rows, TF)
    }

    /// Trajectory-selector logit per decoded row, `rows×1`.
    pub fn traj_logits(
        &self,
        t: &mut Tape,
        ps: &ParamStore,
        enc: &Encoded,
        dec: &Decoded,
    ) -> Result<Var> {
        let h = t.select_rows(enc.state.next[1], &dec.lane_of_row)?;
        let x = t.concat_cols(&[dec.offsets, h])?;
        self.traj_sel.forward(t, ps, x)
    }

    /// Training loss: only the most likely lane is decoded.
    pub fn loss(
        &self,
        t: &mut Tape,
        ps: &ParamStore,
        prep: &Prepared,
        lambda1: f64,
        lambda2: f64,
    ) -> Result<LossParts> {
        self.loss_with(t, ps, prep, lambda1, lambda2, None)
    }

    /// [`JalMtp::loss`] with the trajectory soft labels pinned to `traj_label`.
    pub fn loss_with(
        &self,
        t: &mut Tape,
        ps: &ParamStore,
        prep: &Prepared,
        lambda1: f64,
        lambda2: f64,
        traj_label: Option<&[f64]>,
    ) -> Result<LossParts> {
        let (Some(gt), Some(label), Some(lane)) = (&prep.gt, &prep.lane_label, prep.likely_lane())
        else {
            return Err(crate::Error::Invalid(format!(
                "scene {} has no ground truth",
                prep.scene_id
            )));
        };
        let enc = self.encode(t, ps, prep)?;
        let rows: Vec<(usize, usize)> = (0..self.cfg.k).map(|k| (lane, k)).collect();
        let dec = self.decode(t, ps, &enc, &rows)?;
        let logits = self.traj_logits(t, ps, &enc, &dec)?;
        let logits = t.transpose(logits);
        total_loss(
            t,
            enc.lane_logits,
            logits,
            dec.positions,
            gt,
            label,
            lambda1,
            lambda2,
            traj_label,
        )
    }

    /// Decodes every lane, scores all N×K candidates and keeps the top K.
    pub fn infer(&self, ps: &ParamStore, prep: &Prepared) -> Result<Inference> {
        let mut t = Tape::new();
        let enc = self.encode(&mut t, ps, prep)?;
        let n = prep.num_lanes();
        let k = self.cfg.k;
        let rows: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..k).map(move |j| (i, j))).collect();
        let dec = self.decode(&mut t, ps, &enc, &rows)?;
        let logits = self.traj_logits(&mut t, ps, &enc, &dec)?;

        let lane_probs = softmax(t.value(enc.lane_logits).data());
        let lv = t.value(logits).data();
        let traj_probs: Vec<Vec<f64>> = (0..n).map(|i| softmax(&lv[i * k..(i + 1) * k])).collect();
        let pos = t.value(dec.positions);
        let candidates: Vec<Vec<Vec<Point>>> = (0..n)
            .map(|i| {
                (0..k)
                    .map(|j| flat_points(pos.row_slice(i * k + j)))
                    .collect()
            })
            .collect();
        let pick = combine_and_pick(&lane_probs, &traj_probs, k);
        if pick.short {
            log::warn!(
                "{}: only {} candidates for K={k}",
                prep.scene_id,
                pick.choices.len()
            );
        }
        let world = pick
            .choices
            .iter()
            .map(|&(i, j)| prep.transform.map_world(&candidates[i][j]))
            .collect();
        let mut attention_sums = Vec::new();
        window_sums(&t, &enc.steps, &mut attention_sums);
        window_sums(&t, &dec.steps, &mut attention_sums);
        Ok(Inference {
            scene_id: prep.scene_id.clone(),
            lane_probs,
            traj_probs,
            candidates,
            pick,
            world,
            attention_sums,
        })
    }
}

impl Inference {
    /// Picked trajectories in the agent frame.
    pub fn picked_local(&self) -> Vec<Vec<Point>> {
        self.pick
            .choices
            .iter()
            .map(|&(i, j)| self.candidates[i][j].clone())
            .collect()
    }
}
