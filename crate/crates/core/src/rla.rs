//! Recurrent lane attention. One step: a waypoint GRU proposes a look-ahead
//! point, the hidden state attends over the lane nodes between the nodes
//! nearest the current position and the waypoint, and the next GRU advances.
//!
//! Rows are batched: every row carries its own state and its own lane, so the
//! encoder runs all lanes at once and the decoder all (lane, head) pairs.

use lanepred_autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::encoders::POS_SCALE;
use crate::error::Result;
use crate::geometry::{heading, lane_direction, nearest_node, Point};
use crate::nn::{GruStack, Linear, Mlp};

/// Displacements shorter than this keep the previous heading.
const MIN_STEP: f64 = 1e-6;

/// Node range `[lo, hi]` between the nodes nearest `a` and `b`.
pub fn attention_window(nodes: &[Point], a: Point, b: Point) -> (usize, usize) {
    let (ia, _) = nearest_node(nodes, a);
    let (ib, _) = nearest_node(nodes, b);
    (ia.min(ib), ia.max(ib))
}

#[derive(Clone, Debug)]
pub struct Rla {
    pub wp_gru: GruStack,
    pub wp_head: Mlp,
    pub next_gru: GruStack,
    pub rel_mlp: Mlp,
    pub e1_lane: ParamId,
    pub e1_rel: ParamId,
    pub e1_b: ParamId,
    pub e2: Linear,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub aux_token: ParamId,
    pub predictor: Mlp,
    pub d: usize,
    pub k: usize,
}

/// Lane nodes with their features projected through the lane half of the
/// first node-encoding layer, all lanes stacked.
#[derive(Clone, Debug)]
pub struct LaneMemory {
    pub proj: Var,
    pub nodes: Vec<Vec<Point>>,
    /// `(cos θ, sin θ)` of each node tangent
    pub tangents: Vec<Vec<[f64; 2]>>,
    pub h: usize,
}

#[derive(Clone, Debug)]
pub struct RlaState {
    pub wp: [Var; 2],
    pub next: [Var; 2],
    /// current position per row, `rows×2`
    pub pos: Var,
    /// unit heading per row, `rows×2`
    pub heading: Var,
    pub lane_of_row: Vec<usize>,
}

impl RlaState {
    pub fn rows(&self) -> usize {
        self.lane_of_row.len()
    }
}

#[derive(Clone, Debug)]
pub struct StepOut {
    pub waypoint: Var,
    pub windows: Vec<(usize, usize)>,
    /// attention weights, one per window node, rows concatenated
    pub weights: Var,
}

/// Decoder rollout for a set of (lane, head) rows.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub lane_of_row: Vec<usize>,
    pub head_of_row: Vec<usize>,
    /// `rows×(2·Tf)` absolute positions, time-major
    pub positions: Var,
    /// `rows×(2·Tf)` per-step offsets
    pub offsets: Var,
    pub steps: Vec<StepOut>,
}

fn rows_of(t: &Tape, v: Var) -> Vec<Point> {
    t.value(v).data().chunks(2).map(|c| [c[0], c[1]]).collect()
}

fn unit(theta: f64) -> [f64; 2] {
    [theta.cos(), theta.sin()]
}

impl Rla {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize, k: usize) -> Self {
        let dr = d / 4;
        let fan_e1 = d + dr;
        Rla {
            wp_gru: GruStack::new(ps, rng, "rla.wp_gru", 2, d),
            wp_head: Mlp::new(ps, rng, "rla.wp_head", [d, d, 2]),
            next_gru: GruStack::new(ps, rng, "rla.next_gru", 4 + d, d),
            rel_mlp: Mlp::new(ps, rng, "rla.rel", [3, dr, dr]),
            e1_lane: ps.uniform("rla.node.0.w_lane", d, d, fan_e1, rng),
            e1_rel: ps.uniform("rla.node.0.w_rel", dr, d, fan_e1, rng),
            e1_b: ps.uniform("rla.node.0.b", 1, d, fan_e1, rng),
            e2: Linear::new(ps, rng, "rla.node.1", d, d),
            wq: ps.uniform("rla.wq", d, d, d, rng),
            wk: ps.uniform("rla.wk", d, d, d, rng),
            wv: ps.uniform("rla.wv", d, d, d, rng),
            aux_token: ps.uniform("rla.aux_token", 1, d, d, rng),
            predictor: Mlp::new(ps, rng, "rla.predictor", [d, d, 2 * k]),
            d,
            k,
        }
    }

    pub fn memory(
        &self,
        t: &mut Tape,
        ps: &ParamStore,
        lanes: &[Var],
        nodes: &[Vec<Point>],
    ) -> Result<LaneMemory> {
        let all = t.concat_rows(lanes)?;
        let w = t.param(ps, self.e1_lane);
        let b = t.param(ps, self.e1_b);
        let p = t.matmul(all, w)?;
        let proj = t.add_row(p, b)?;
        let tangents = nodes
            .iter()
            .map(|n| (0..n.len()).map(|h| unit(lane_direction(n, h))).collect())
            .collect();
        Ok(LaneMemory {
            proj,
            nodes: nodes.to_vec(),
            tangents,
            h: nodes[0].len(),
        })
    }

    /// Zero-initialized state for one row per lane.
    pub fn initial_state(&self, t: &mut Tape, lanes: usize) -> RlaState {
        let z = t.constant(Tensor::zeros(lanes, self.d));
        let p = t.constant(Tensor::zeros(lanes, 2));
        let hd = t.constant(Tensor::matrix(lanes, 2, [1.0, 0.0].repeat(lanes)));
        RlaState {
            wp: [z, z],
            next: [z, z],
            pos: p,
            heading: hd,
            lane_of_row: (0..lanes).collect(),
        }
    }

    /// Waypoint GRU update and waypoint `b = a + S·φ(h)`.
    pub fn waypoint_step(
        &self,
        t: &mut Tape,
        ps: &ParamStore,
        state: &mut RlaState,
    ) -> Result<Var> {
        let x = t.scale(state.pos, 1.0 / POS_SCALE);
        state.wp = self.wp_gru.step(t, ps, x, state.wp)?;
        let off = self.wp_head.forward(t, ps, state.wp[1])?;
        let off = t.scale(off, POS_SCALE);
        Ok(t.add(state.pos, off)?)
    }

    /// Attention of each row's top next-GRU state over its window; returns
    /// the residual-updated state and the attention weights.
    pub fn lane_attention(
        &self,
        t: &mut Tape,
        ps: &ParamStore,
        mem: &LaneMemory,
        state: &RlaState,
        windows: &[(usize, usize)],
    ) -> Result<(Var, Var)> {
        let rows = state.rows();
        let mut global = Vec::new();
        let mut row_of_node = Vec::new();
        let mut lens = Vec::with_capacity(rows);
        let mut coords = Vec::new();
        let mut tan = Vec::new();
        let mut tan_perp = Vec::new();
        for (r, &(lo, hi)) in windows.iter().enumerate() {
            let lane = state.lane_of_row[r];
            lens.push(hi - lo + 1);
            for h in lo..=hi {
                global.push(lane * mem.h + h);
                row_of_node.push(r);
                let p = mem.nodes[lane][h];
                let [c, s] = mem.tangents[lane][h];
                coords.extend_from_slice(&p);
                tan.extend_from_slice(&[c, s]);
                tan_perp.extend_from_slice(&[s, -c]);
            }
        }
        let w = global.len();
        let nodes = t.constant(Tensor::matrix(w, 2, coords));
        let a = t.select_rows(state.pos, &row_of_node)?;
        let diff = t.sub(nodes, a)?;
        let dn = t.row_norms(diff);
        let dn = t.scale(dn, 1.0 / POS_SCALE);
        // cos and sin of (node tangent − agent heading)
        let hd = t.select_rows(state.heading, &row_of_node)?;
        let tc = t.constant(Tensor::matrix(w, 2, tan));
        let ts = t.constant(Tensor::matrix(w, 2, tan_perp));
        let cos = t.row_dot(tc, hd)?;
        let sin = t.row_dot(ts, hd)?;
        let rin = t.concat_cols(&[dn, cos, sin])?;
        let rel = self.rel_mlp.forward(t, ps, rin)?;

        let lane_part = t.select_rows(mem.proj, &global)?;
        let w_rel = t.param(ps, self.e1_rel);
        let rel_part = t.matmul(rel, w_rel)?;
        let e = t.add(lane_part, rel_part)?;
        let e = t.relu(e);
        let e = self.e2.forward(t, ps, e)?;

        let (wq, wk, wv) = (
            t.param(ps, self.wq),
            t.param(ps, self.wk),
            t.param(ps, self.wv),
        );
        let q = t.matmul(state.next[1], wq)?;
        let kk = t.matmul(e, wk)?;
        let v = t.matmul(e, wv)?;
        let qn = t.select_rows(q, &row_of_node)?;
        let s = t.row_dot(qn, kk)?;
        let s = t.scale(s, 1.0 / (self.d as f64).sqrt());
        let weights = t.segment_softmax(s, &lens)?;
        let wv_rows = t.scale_rows(v, weights)?;
        let alpha = t.scatter_rows(wv_rows, row_of_node, rows)?;
        let h = t.add(state.next[1], alpha)?;
        Ok((h, weights))
    }

    /// One full step: waypoint, window, attention, next-GRU update.
    pub fn step(
        &self,
        t: &mut Tape,
        ps: &ParamStore,
        mem: &LaneMemory,
        state: &mut RlaState,
        aux: Var,
    ) -> Result<StepOut> {
        let b = self.waypoint_step(t, ps, state)?;
        let (pa, pb) = (rows_of(t, state.pos), rows_of(t, b));
        let windows: Vec<(usize, usize)> = (0..state.rows())
            .map(|r| attention_window(&mem.nodes[state.lane_of_row[r]], pa[r], pb[r]))
            .collect();
        let (h1, weights) = self.lane_attention(t, ps, mem, state, &windows)?;
        let a_in = t.scale(state.pos, 1.0 / POS_SCALE);
        let look = t.sub(b, state.pos)?;
        let look = t.scale(look, 1.0 / POS_SCALE);
        let x = t.concat_cols(&[a_in, look, aux])?;
        state.next = self.next_gru.step(t, ps, x, [state.next[0], h1])?;
        Ok(StepOut {
            waypoint: b,
            windows,
            weights,
        })
    }

    /// Runs the observed past through every lane. `motion` is the `Tp×d`
    /// target feature; row `i` is the auxiliary input at step `i`.
    pub fn encode(
        &self,
        t: &mut Tape,
        ps: &ParamStore,
        mem: &LaneMemory,
        past: &[Point],
        motion: Var,
    ) -> Result<(RlaState, Vec<StepOut>)> {
        let n = mem.nodes.len();
        let mut state = self.initial_state(t, n);
        let mut outs = Vec::with_capacity(past.len());
        for (i, p) in past.iter().enumerate() {
            state.pos = t.constant(Tensor::matrix(n, 2, p.repeat(n)));
            state.heading = t.constant(Tensor::matrix(n, 2, unit(heading(past, i)).repeat(n)));
            let aux = t.select_rows(motion, &vec![i; n])?;
            outs.push(self.step(t, ps, mem, &mut state, aux)?);
        }
        Ok((state, outs))
    }

    /// Autoregressive rollout of `steps` points for each `(lane, head)` row,
    /// starting from the encoder states of those lanes.
    pub fn decode(
        &self,
        t: &mut Tape,
        ps: &ParamStore,
        mem: &LaneMemory,
        enc: &RlaState,
        rows: &[(usize, usize)],
        steps: usize,
    ) -> Result<Decoded> {
        let lane_of_row: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let head_of_row: Vec<usize> = rows.iter().map(|r| r.1).collect();
        let n = rows.len();
        let pick = |t: &mut Tape, v: Var| t.select_rows(v, &lane_of_row);
        let mut state = RlaState {
            wp: [pick(t, enc.wp[0])?, pick(t, enc.wp[1])?],
            next: [pick(t, enc.next[0])?, pick(t, enc.next[1])?],
            pos: pick(t, enc.pos)?,
            heading: pick(t, enc.heading)?,
            lane_of_row: lane_of_row.clone(),
        };
        let token = t.param(ps, self.aux_token);
        let aux = t.select_rows(token, &vec![0; n])?;
        let two_k = 2 * self.k;
        let cols: Vec<usize> = head_of_row
            .iter()
            .enumerate()
            .flat_map(|(r, &k)| [r * two_k + 2 * k, r * two_k + 2 * k + 1])
            .collect();
        let mut positions = Vec::with_capacity(steps);
        let mut offsets = Vec::with_capacity(steps);
        let mut outs = Vec::with_capacity(steps);
        for _ in 0..steps {
            outs.push(self.step(t, ps, mem, &mut state, aux)?);
            let out = self.predictor.forward(t, ps, state.next[1])?;
            let off = t.gather(out, cols.clone(), n, 2)?;
            let pos = t.add(state.pos, off)?;
            state.heading = self.next_heading(t, off, state.heading)?;
            state.pos = pos;
            positions.push(pos);
            offsets.push(off);
        }
        Ok(Decoded {
            lane_of_row,
            head_of_row,
            positions: t.concat_cols(&positions)?,
            offsets: t.concat_cols(&offsets)?,
            steps: outs,
        })
    }

    /// Direction of the latest offset, or the previous heading for rows that
    /// barely moved.
    fn next_heading(&self, t: &mut Tape, off: Var, prev: Var) -> Result<Var> {
        let lens: Vec<f64> = t
            .value(off)
            .data()
            .chunks(2)
            .map(|c| c[0].hypot(c[1]))
            .collect();
        let u = t.normalize_rows(off);
        if lens.iter().all(|&l| l >= MIN_STEP) {
            return Ok(u);
        }
        let n = lens.len();
        let both = t.concat_rows(&[u, prev])?;
        let idx: Vec<usize> = lens
            .iter()
            .enumerate()
            .map(|(r, &l)| if l >= MIN_STEP { r } else { n + r })
            .collect();
        Ok(t.select_rows(both, &idx)?)
    }
}
