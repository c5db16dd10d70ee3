use lanepred::config::ExperimentConfig;
use lanepred::eval::{
    evaluate, evaluate_predictions, load_predictions, predict_scenes, save_predictions,
    write_report, PredictionRecord,
};
use lanepred::geometry::dist;
use lanepred::model::{JalMtp, ModelConfig};
use lanepred::scene::{load_scenes, save_scenes, Scene, TF};
use lanepred::synth::{gen_synthetic, TemplateMix};
use lanepred_autodiff::ParamStore;

fn small_model() -> (JalMtp, ParamStore) {
    let cfg = ExperimentConfig {
        d: 16,
        ..Default::default()
    };
    JalMtp::new(ModelConfig::from(&cfg), 2)
}

fn scenes(n: usize) -> Vec<Scene> {
    let mix: TemplateMix = "straight,curve,fork,intersection,congestion"
        .parse()
        .unwrap();
    gen_synthetic(&mix, n, 42)
}

#[test]
fn predictions_survive_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("scenes.jsonl");
    save_scenes(&data, &scenes(5)).unwrap();
    let loaded = load_scenes(&data).unwrap();
    assert_eq!(loaded, scenes(5));

    let (m, ps) = small_model();
    let preds = predict_scenes(&m, &ps, &loaded, 6);
    assert_eq!(preds.len(), 5);
    for p in &preds {
        assert!(p.error.is_none(), "{:?}", p.error);
        assert_eq!(p.trajectories.len(), 6);
        assert!(p.trajectories.iter().all(|t| t.len() == TF));
        assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let out = dir.path().join("preds.jsonl");
    save_predictions(&out, &preds).unwrap();
    assert_eq!(load_predictions(&out).unwrap(), preds);
}

#[test]
fn translated_scene_gives_translated_predictions() {
    let (m, ps) = small_model();
    let base = scenes(3);
    let shift = [256.0, -128.0];
    let moved: Vec<Scene> = base
        .iter()
        .map(|s| {
            let mv = |p: &[f64; 2]| [p[0] + shift[0], p[1] + shift[1]];
            let mut s = s.clone();
            s.target_past = s.target_past.iter().map(mv).collect();
            s.social_pasts = s
                .social_pasts
                .iter()
                .map(|a| a.iter().map(mv).collect())
                .collect();
            for seg in &mut s.lanes.segments {
                seg.nodes = seg.nodes.iter().map(mv).collect();
            }
            s.gt_future = s.gt_future.as_ref().map(|g| g.iter().map(mv).collect());
            s
        })
        .collect();
    let a = predict_scenes(&m, &ps, &base, 6);
    let b = predict_scenes(&m, &ps, &moved, 6);
    for (pa, pb) in a.iter().zip(&b) {
        for (ta, tb) in pa.trajectories.iter().zip(&pb.trajectories) {
            for (x, y) in ta.iter().zip(tb) {
                assert!(dist([x[0] + shift[0], x[1] + shift[1]], *y) < 1e-8);
            }
        }
        for (x, y) in pa.probs.iter().zip(&pb.probs) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn perfect_predictions_score_zero() {
    let sc = scenes(6);
    let preds: Vec<PredictionRecord> = sc
        .iter()
        .map(|s| PredictionRecord {
            scene_id: s.scene_id.clone(),
            trajectories: vec![s.gt_future.clone().unwrap(); 6],
            probs: vec![1.0 / 6.0; 6],
            error: None,
        })
        .collect();
    let r = evaluate_predictions(&sc, &preds, 6);
    assert_eq!(r.scenes, 6);
    assert_eq!((r.min_ade, r.min_fde, r.mr, r.p_mr), (0.0, 0.0, 0.0, 0.0));
    assert_eq!(r.horizon_ade, vec![0.0; TF]);
    assert_eq!(r.horizon_fde, vec![0.0; TF]);
}

#[test]
fn off_map_scene_fails_alone() {
    let mut sc = scenes(3);
    for seg in &mut sc[1].lanes.segments {
        for n in &mut seg.nodes {
            n[0] += 5000.0;
        }
    }
    let (m, ps) = small_model();
    let preds = predict_scenes(&m, &ps, &sc, 6);
    assert!(preds[0].error.is_none() && preds[2].error.is_none());
    assert!(preds[1].error.as_deref().unwrap().contains("off-map"));
    let r = evaluate_predictions(&sc, &preds, 6);
    assert_eq!(r.scenes, 2);
    assert_eq!(r.failed.len(), 1);
}

#[test]
fn evaluation_is_repeatable_and_writes_both_reports() {
    let (m, ps) = small_model();
    let sc = scenes(4);
    let a = evaluate(&m, &ps, &sc);
    let b = evaluate(&m, &ps, &sc);
    assert_eq!(a, b);
    assert_eq!(a.horizon_ade.len(), TF);
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("report");
    write_report(&a, &stem).unwrap();
    let table = std::fs::read_to_string(stem.with_extension("txt")).unwrap();
    assert!(table.contains("minADE"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json")).unwrap())
            .unwrap();
    assert_eq!(json["horizon_fde"].as_array().unwrap().len(), TF);
}
