//! Score combination, self-supervised labels and the training loss.

use std::cmp::Ordering;

use lanepred_autodiff::{Tape, Tensor, Var};

use crate::error::Result;
use crate::geometry::{dist, Point};

/// Numerically stable softmax of a slice.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

/// `Σ_t t·min_h ‖y_t − l_h‖` with `t` counted from 1.
pub fn d1(lane: &[Point], gt: &[Point]) -> f64 {
    gt.iter()
        .enumerate()
        .map(|(i, &y)| {
            let m = lane
                .iter()
                .map(|&l| dist(y, l))
                .fold(f64::INFINITY, f64::min);
            (i + 1) as f64 * m
        })
        .sum()
}

/// `Σ_t ‖y_t − ŷ_t‖`.
pub fn d2(traj: &[Point], gt: &[Point]) -> f64 {
    traj.iter().zip(gt).map(|(&a, &b)| dist(a, b)).sum()
}

pub fn lane_labels(lanes: &[Vec<Point>], gt: &[Point]) -> Vec<f64> {
    let neg: Vec<f64> = lanes.iter().map(|l| -d1(l, gt)).collect();
    softmax(&neg)
}

pub fn traj_labels(trajs: &[Vec<Point>], gt: &[Point]) -> Vec<f64> {
    let neg: Vec<f64> = trajs.iter().map(|y| -d2(y, gt)).collect();
    softmax(&neg)
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// The selected `(lane, head)` candidates with renormalized probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Pick {
    pub choices: Vec<(usize, usize)>,
    pub probs: Vec<f64>,
    /// fewer than `k` candidates existed
    pub short: bool,
}

/// Global top-`k` of `lane[i]·traj[i][j]`, ties going to the lower lane and
/// then the lower head.
pub fn combine_and_pick(lane: &[f64], traj: &[Vec<f64>], k: usize) -> Pick {
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (i, (&pl, row)) in lane.iter().zip(traj).enumerate() {
        for (j, &pt) in row.iter().enumerate() {
            cands.push((pl * pt, i, j));
        }
    }
    // the candidate list is already in (lane, head) order and the sort is stable
    cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    let short = cands.len() < k;
    cands.truncate(k);
    let total: f64 = cands.iter().map(|c| c.0).sum();
    let probs = if total > 0.0 {
        cands.iter().map(|c| c.0 / total).collect()
    } else {
        vec![1.0 / cands.len() as f64; cands.len()]
    };
    Pick {
        choices: cands.iter().map(|c| (c.1, c.2)).collect(),
        probs,
        short,
    }
}

/// Scalar loss on the tape plus its parts as plain numbers.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: Var,
    pub reg: f64,
    pub lane_ce: f64,
    pub traj_ce: f64,
    pub best_head: usize,
    pub traj_label: Vec<f64>,
}

pub fn flat_points(row: &[f64]) -> Vec<Point> {
    row.chunks(2).map(|c| [c[0], c[1]]).collect()
}

/// `L_reg + λ1·CE(lane) + λ2·CE(traj)`.
///
/// `lane_logits` is `1×N`; `traj_logits` is `1×K` for the most likely lane,
/// whose `K` decoded trajectories are the rows of `positions` (`K×2Tf`).
/// The trajectory soft labels are built from the current positions but enter
/// as constants; `fixed_traj_label` replaces them, which lets a finite
/// difference check hold them still.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    t: &mut Tape,
    lane_logits: Var,
    traj_logits: Var,
    positions: Var,
    gt: &[Point],
    lane_label: &[f64],
    lambda1: f64,
    lambda2: f64,
    fixed_traj_label: Option<&[f64]>,
) -> Result<LossParts> {
    let trajs: Vec<Vec<Point>> = {
        let v = t.value(positions);
        (0..v.rows()).map(|r| flat_points(v.row_slice(r))).collect()
    };
    let d2s: Vec<f64> = trajs.iter().map(|y| d2(y, gt)).collect();
    let best = argmax(&d2s.iter().map(|v| -v).collect::<Vec<_>>());
    let tf = gt.len();
    let row = t.select_rows(positions, &[best])?;
    let pts = t.gather(row, (0..2 * tf).collect(), tf, 2)?;
    let gt_flat: Vec<f64> = gt.iter().flat_map(|p| [p[0], p[1]]).collect();
    let gtv = t.constant(Tensor::matrix(tf, 2, gt_flat));
    let reg = t.l1_distance(pts, gtv)?;
    let reg = t.scale(reg, 1.0 / tf as f64);

    let traj_label = match fixed_traj_label {
        Some(l) => l.to_vec(),
        None => traj_labels(&trajs, gt),
    };
    let lane_ce = t.softmax_cross_entropy(lane_logits, &Tensor::row(lane_label))?;
    let traj_ce = t.softmax_cross_entropy(traj_logits, &Tensor::row(&traj_label))?;
    let l1 = t.scale(lane_ce, lambda1);
    let l2 = t.scale(traj_ce, lambda2);
    let s = t.add(reg, l1)?;
    let total = t.add(s, l2)?;
    Ok(LossParts {
        total,
        reg: t.value(reg).item(),
        lane_ce: t.value(lane_ce).item(),
        traj_ce: t.value(traj_ce).item(),
        best_head: best,
        traj_label,
    })
}
