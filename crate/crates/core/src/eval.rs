//! Prediction export and dataset evaluation.

use std::io::Write;
use std::path::Path;

use lanepred_autodiff::ParamStore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::metrics::{score_scene, EvalReport};
use crate::model::{prepare, JalMtp};
use crate::scene::Scene;
use crate::selectors::combine_and_pick;

/// One line of a prediction file; world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub scene_id: String,
    #[serde(default)]
    pub trajectories: Vec<Vec<Point>>,
    #[serde(default)]
    pub probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn predict_one(model: &JalMtp, ps: &ParamStore, s: &Scene, k: usize) -> PredictionRecord {
    let run = || -> Result<PredictionRecord> {
        let prep = prepare(s, &model.cfg)?;
        let inf = model.infer(ps, &prep)?;
        let pick = combine_and_pick(&inf.lane_probs, &inf.traj_probs, k);
        let trajectories = pick
            .choices
            .iter()
            .map(|&(i, j)| prep.transform.map_world(&inf.candidates[i][j]))
            .collect();
        Ok(PredictionRecord {
            scene_id: s.scene_id.clone(),
            trajectories,
            probs: pick.probs,
            error: None,
        })
    };
    run().unwrap_or_else(|e| {
        log::warn!("{}: {e}", s.scene_id);
        PredictionRecord {
            scene_id: s.scene_id.clone(),
            trajectories: Vec::new(),
            probs: Vec::new(),
            error: Some(e.to_string()),
        }
    })
}

/// Top-`k` predictions per scene; scenes that fail are recorded, not fatal.
/// Scenes are split across the available cores; output order follows input.
pub fn predict_scenes(
    model: &JalMtp,
    ps: &ParamStore,
    scenes: &[Scene],
    k: usize,
) -> Vec<PredictionRecord> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    if workers <= 1 || scenes.len() < 2 {
        return scenes
            .iter()
            .map(|s| predict_one(model, ps, s, k))
            .collect();
    }
    let chunk = scenes.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = scenes
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|s| predict_one(model, ps, s, k))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("prediction worker panicked"))
            .collect()
    })
}

/// Scores predictions against the scenes' ground truth, matching by id.
pub fn evaluate_predictions(scenes: &[Scene], preds: &[PredictionRecord], k: usize) -> EvalReport {
    let mut records = Vec::new();
    let mut failed = Vec::new();
    for s in scenes {
        let Some(gt) = &s.gt_future else {
            failed.push((s.scene_id.clone(), "no ground truth".to_string()));
            continue;
        };
        let Some(p) = preds.iter().find(|p| p.scene_id == s.scene_id) else {
            failed.push((s.scene_id.clone(), "no prediction".to_string()));
            continue;
        };
        if let Some(e) = &p.error {
            failed.push((s.scene_id.clone(), e.clone()));
            continue;
        }
        match score_scene(&s.scene_id, &p.trajectories, &p.probs, gt) {
            Ok(r) => records.push(r),
            Err(e) => failed.push((s.scene_id.clone(), e.to_string())),
        }
    }
    EvalReport::from_records(k, records, failed)
}

pub fn evaluate(model: &JalMtp, ps: &ParamStore, scenes: &[Scene]) -> EvalReport {
    let k = model.cfg.k;
    evaluate_predictions(scenes, &predict_scenes(model, ps, scenes, k), k)
}

pub fn save_predictions(path: impl AsRef<Path>, preds: &[PredictionRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for p in preds {
        serde_json::to_writer(&mut out, p).map_err(|e| Error::Invalid(e.to_string()))?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Writes `<stem>.txt` (table) and `<stem>.json` (records) next to `path`.
pub fn write_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let txt = path.with_extension("txt");
    let json = path.with_extension("json");
    std::fs::write(&txt, report.to_table()).map_err(|e| Error::io(&txt, e))?;
    let mut f = std::fs::File::create(&json).map_err(|e| Error::io(&json, e))?;
    serde_json::to_writer_pretty(&mut f, report).map_err(|e| Error::Invalid(e.to_string()))?;
    f.write_all(b"\n").map_err(|e| Error::io(&json, e))
}
