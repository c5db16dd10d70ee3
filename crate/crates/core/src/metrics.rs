//! Displacement metrics over a set of K predicted trajectories.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist, Point};

/// Endpoint error above which a scene counts as a miss.
pub const MISS_THRESHOLD: f64 = 2.0;
/// Probabilities below this are clamped inside the log penalty.
pub const MIN_PROB: f64 = 0.05;
const PROB_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinErrors {
    pub min_ade: f64,
    pub min_fde: f64,
    /// minimizer of the endpoint error
    pub best_k: usize,
    /// minimizer of the average error
    pub best_ade_k: usize,
}

fn ade(pred: &[Point], gt: &[Point], t: usize) -> f64 {
    pred[..t]
        .iter()
        .zip(&gt[..t])
        .map(|(&a, &b)| dist(a, b))
        .sum::<f64>()
        / t as f64
}

fn argmin(xs: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, v) in xs.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best
}

/// minADE and minFDE over the first `t` steps, each with its own minimizer.
pub fn min_ade_fde_at(preds: &[Vec<Point>], gt: &[Point], t: usize) -> MinErrors {
    let (ka, a) = argmin(preds.iter().map(|p| ade(p, gt, t)));
    let (kf, f) = argmin(preds.iter().map(|p| dist(p[t - 1], gt[t - 1])));
    MinErrors {
        min_ade: a,
        min_fde: f,
        best_k: kf,
        best_ade_k: ka,
    }
}

pub fn min_ade_fde(preds: &[Vec<Point>], gt: &[Point]) -> MinErrors {
    min_ade_fde_at(preds, gt, gt.len())
}

pub fn miss_rate(min_fdes: &[f64]) -> f64 {
    if min_fdes.is_empty() {
        return 0.0;
    }
    min_fdes.iter().filter(|&&f| f > MISS_THRESHOLD).count() as f64 / min_fdes.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbMetrics {
    pub p_ade: f64,
    pub p_fde: f64,
    pub brier_ade: f64,
    pub brier_fde: f64,
    pub p_miss: bool,
}

fn log_penalty(p: f64) -> f64 {
    (-p.ln()).min(-MIN_PROB.ln())
}

pub fn prob_metrics(preds: &[Vec<Point>], probs: &[f64], gt: &[Point]) -> Result<ProbMetrics> {
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > PROB_TOL || probs.iter().any(|&p| p < 0.0) || probs.len() != preds.len() {
        return Err(Error::Unnormalized(s));
    }
    let m = min_ade_fde(preds, gt);
    let (pf, pa) = (probs[m.best_k], probs[m.best_ade_k]);
    let p_fde = m.min_fde + log_penalty(pf);
    Ok(ProbMetrics {
        p_ade: m.min_ade + log_penalty(pa),
        p_fde,
        brier_ade: m.min_ade + (1.0 - pa).powi(2),
        brier_fde: m.min_fde + (1.0 - pf).powi(2),
        p_miss: p_fde > MISS_THRESHOLD,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss: bool,
    pub p_ade: f64,
    pub p_fde: f64,
    pub brier_ade: f64,
    pub brier_fde: f64,
    pub p_miss: bool,
    pub best_k: usize,
    pub ade_curve: Vec<f64>,
    pub fde_curve: Vec<f64>,
}

pub fn score_scene(
    id: &str,
    preds: &[Vec<Point>],
    probs: &[f64],
    gt: &[Point],
) -> Result<SceneRecord> {
    let m = min_ade_fde(preds, gt);
    let p = prob_metrics(preds, probs, gt)?;
    let curves: Vec<MinErrors> = (1..=gt.len())
        .map(|t| min_ade_fde_at(preds, gt, t))
        .collect();
    Ok(SceneRecord {
        scene_id: id.to_string(),
        min_ade: m.min_ade,
        min_fde: m.min_fde,
        miss: m.min_fde > MISS_THRESHOLD,
        p_ade: p.p_ade,
        p_fde: p.p_fde,
        brier_ade: p.brier_ade,
        brier_fde: p.brier_fde,
        p_miss: p.p_miss,
        best_k: m.best_k,
        ade_curve: curves.iter().map(|c| c.min_ade).collect(),
        fde_curve: curves.iter().map(|c| c.min_fde).collect(),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub scenes: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub mr: f64,
    pub p_ade: f64,
    pub p_fde: f64,
    pub brier_ade: f64,
    pub brier_fde: f64,
    pub p_mr: f64,
    pub horizon_ade: Vec<f64>,
    pub horizon_fde: Vec<f64>,
    pub records: Vec<SceneRecord>,
    pub failed: Vec<(String, String)>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl EvalReport {
    pub fn from_records(
        k: usize,
        records: Vec<SceneRecord>,
        failed: Vec<(String, String)>,
    ) -> Self {
        let horizon = records.first().map_or(0, |r| r.ade_curve.len());
        let col = |f: &dyn Fn(&SceneRecord) -> f64| mean(records.iter().map(f));
        let frac = |f: &dyn Fn(&SceneRecord) -> bool| col(&|r| if f(r) { 1.0 } else { 0.0 });
        EvalReport {
            k,
            scenes: records.len(),
            min_ade: col(&|r| r.min_ade),
            min_fde: col(&|r| r.min_fde),
            mr: frac(&|r| r.miss),
            p_ade: col(&|r| r.p_ade),
            p_fde: col(&|r| r.p_fde),
            brier_ade: col(&|r| r.brier_ade),
            brier_fde: col(&|r| r.brier_fde),
            p_mr: frac(&|r| r.p_miss),
            horizon_ade: (0..horizon)
                .map(|t| mean(records.iter().map(|r| r.ade_curve[t])))
                .collect(),
            horizon_fde: (0..horizon)
                .map(|t| mean(records.iter().map(|r| r.fde_curve[t])))
                .collect(),
            records,
            failed,
        }
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "# {} scenes, K={}, {} failed; p-metrics clamp -ln p at -ln {MIN_PROB}\n",
            self.scenes,
            self.k,
            self.failed.len()
        ));
        let rows = [
            ("minADE", self.min_ade),
            ("minFDE", self.min_fde),
            ("MR", self.mr),
            ("p-ADE", self.p_ade),
            ("p-FDE", self.p_fde),
            ("p-MR", self.p_mr),
            ("brier-ADE", self.brier_ade),
            ("brier-FDE", self.brier_fde),
        ];
        for (name, v) in rows {
            s.push_str(&format!("{name:<10} {v:>9.4}\n"));
        }
        s.push_str("\n   t  minADE(t)  minFDE(t)\n");
        for (t, (a, f)) in self.horizon_ade.iter().zip(&self.horizon_fde).enumerate() {
            s.push_str(&format!("{:>4} {a:>10.4} {f:>10.4}\n", t + 1));
        }
        for (id, msg) in &self.failed {
            s.push_str(&format!("failed {id}: {msg}\n"));
        }
        s
    }
}
