//! End-to-end acceptance checks. Runs without the libtest harness so the
//! criteria execute one after another (the timing check needs the core to
//! itself) and each prints a single PASS/FAIL line.
//!
//! `cargo test --release -p lanepred-core --test acceptance`

use std::process::ExitCode;
use std::time::{Duration, Instant};

use lanepred::checkpoint::Checkpoint;
use lanepred::config::ExperimentConfig;
use lanepred::eval::evaluate;
use lanepred::geometry::{dist, nearest_node, Point, DT};
use lanepred::metrics::min_ade_fde;
use lanepred::model::{prepare, JalMtp, ModelConfig, Prepared};
use lanepred::scene::{Scene, TF, TP};
use lanepred::selectors::{combine_and_pick, lane_labels, traj_labels, Pick};
use lanepred::synth::{
    gen_congestion_pair, gen_forks_with_branch_ends, gen_synthetic, TemplateMix,
};
use lanepred::train::{prepare_training, StepLog, Trainer};
use lanepred_autodiff::{grad_check, op_catalog, ParamStore, Tape};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mix(s: &str) -> TemplateMix {
    s.parse().expect("template mix")
}

fn train(cfg: ExperimentConfig, scenes: &[Scene]) -> (Trainer, Vec<StepLog>, Duration) {
    let steps = cfg.steps;
    let mut tr = Trainer::new(cfg).expect("config");
    let data = prepare_training(scenes, &tr.model.cfg);
    let start = Instant::now();
    let log = tr.run(&data, steps, |_| {}).expect("training");
    (tr, log, start.elapsed())
}

// ---------------------------------------------------------------- 1

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst_op: (f64, &str) = (0.0, "");
    for seed in 0..10 {
        for case in op_catalog(seed) {
            let err = grad_check(&case.inputs, 1e-6, case.build)
                .map_err(|e| format!("{}: {e}", case.name))?;
            if err > worst_op.0 {
                worst_op = (err, case.name);
            }
        }
    }

    let cfg = ExperimentConfig::default();
    let (model, mut ps) = JalMtp::new(ModelConfig::from(&cfg), 3);
    let scene = &gen_synthetic(&mix("fork"), 1, 5)[0];
    let prep = prepare(scene, &model.cfg).map_err(|e| e.to_string())?;
    let mut t = Tape::new();
    let parts = model
        .loss(&mut t, &ps, &prep, cfg.lambda1, cfg.lambda2)
        .unwrap();
    // the trajectory soft labels are constants of the loss, so the difference
    // quotient must see them as constants too
    let label = parts.traj_label.clone();
    let loss_at = |ps: &ParamStore| -> f64 {
        let mut t = Tape::new();
        let parts = model
            .loss_with(&mut t, ps, &prep, cfg.lambda1, cfg.lambda2, Some(&label))
            .unwrap();
        t.value(parts.total).item()
    };
    let grads = t.backward(parts.total).unwrap();
    let analytic: Vec<Vec<f64>> = {
        let mut g: Vec<Vec<f64>> = ps.iter().map(|(_, _, v)| vec![0.0; v.len()]).collect();
        for (id, gt) in grads.params() {
            g[id.index()] = gt.data().to_vec();
        }
        g
    };
    let ids: Vec<_> = ps.ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let total = ps.num_scalars();
    let mut worst_e2e: f64 = 0.0;
    for _ in 0..20 {
        // uniform over scalars, not over tensors
        let mut flat = rng.gen_range(0..total);
        let mut pick = None;
        for &id in &ids {
            let n = ps.get(id).len();
            if flat < n {
                pick = Some((id, flat));
                break;
            }
            flat -= n;
        }
        let (id, k) = pick.unwrap();
        let eps = 1e-6;
        let orig = ps.get(id).data()[k];
        ps.get_mut(id).data_mut()[k] = orig + eps;
        let up = loss_at(&ps);
        ps.get_mut(id).data_mut()[k] = orig - eps;
        let down = loss_at(&ps);
        ps.get_mut(id).data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[id.index()][k];
        // floor keeps round-off in the difference quotient from dominating
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
        worst_e2e = worst_e2e.max(rel);
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst_op.0 < 1e-4 && worst_e2e < 1e-3 && secs < 120.0,
        format!(
            "op worst {:.1e} ({}), end-to-end worst {worst_e2e:.1e} over 20 params, {secs:.1}s",
            worst_op.0, worst_op.1
        ),
    )
}

// ---------------------------------------------------------------- 2

fn normalization() -> Outcome {
    let cfg = ExperimentConfig::default();
    let (model, ps) = JalMtp::new(ModelConfig::from(&cfg), 11);
    let scenes = gen_synthetic(&mix("straight,curve,fork,intersection,congestion"), 100, 21);
    let mut worst: f64 = 0.0;
    let mut counted = 0usize;
    let mut note = |s: f64| {
        worst = worst.max((s - 1.0).abs());
        counted += 1;
    };
    for s in &scenes {
        let prep = prepare(s, &model.cfg).map_err(|e| format!("{}: {e}", s.scene_id))?;
        let inf = model.infer(&ps, &prep).map_err(|e| e.to_string())?;
        inf.attention_sums.iter().for_each(|&v| note(v));
        note(inf.lane_probs.iter().sum());
        inf.traj_probs.iter().for_each(|r| note(r.iter().sum()));
        note(inf.pick.probs.iter().sum());
        let gt = s.gt_future.as_ref().unwrap();
        let local_gt = prep.gt.as_ref().unwrap();
        assert_eq!(gt.len(), local_gt.len());
        note(lane_labels(&prep.lanes, local_gt).iter().sum());
        for lane in &inf.candidates {
            note(traj_labels(lane, local_gt).iter().sum());
        }
    }
    check(
        worst <= 1e-9,
        format!("{counted} distributions over 100 scenes, worst |sum - 1| = {worst:.1e}"),
    )
}

// ---------------------------------------------------------------- 3

fn brute_nearest(nodes: &[Point], p: Point) -> (usize, f64) {
    let ds: Vec<f64> = nodes.iter().map(|&n| dist(n, p)).collect();
    let m = ds.iter().copied().fold(f64::INFINITY, f64::min);
    let i = ds.iter().position(|&d| d == m).unwrap();
    (i, m)
}

fn brute_pick(lane: &[f64], traj: &[Vec<f64>], k: usize) -> Pick {
    let mut left: Vec<(usize, usize, f64)> = Vec::new();
    for (i, row) in traj.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            left.push((i, j, lane[i] * p));
        }
    }
    let short = left.len() < k;
    let mut chosen = Vec::new();
    while chosen.len() < k && !left.is_empty() {
        let mut best = 0;
        for c in 1..left.len() {
            let (a, b) = (left[c], left[best]);
            let better = a.2 > b.2 || (a.2 == b.2 && (a.0, a.1) < (b.0, b.1));
            if better {
                best = c;
            }
        }
        chosen.push(left.remove(best));
    }
    let total: f64 = chosen.iter().map(|c| c.2).sum();
    Pick {
        choices: chosen.iter().map(|c| (c.0, c.1)).collect(),
        probs: chosen.iter().map(|c| c.2 / total).collect(),
        short,
    }
}

fn brute_min_ade_fde(preds: &[Vec<Point>], gt: &[Point]) -> (f64, f64) {
    let mut best_a = f64::INFINITY;
    let mut best_f = f64::INFINITY;
    for p in preds {
        let mut s = 0.0;
        for t in 0..gt.len() {
            s += dist(p[t], gt[t]);
        }
        best_a = best_a.min(s / gt.len() as f64);
        best_f = best_f.min(dist(p[gt.len() - 1], gt[gt.len() - 1]));
    }
    (best_a, best_f)
}

fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = Vec::new();
    for case in 0..1000 {
        // coarse grids make exact ties common
        let grid = |rng: &mut ChaCha8Rng| rng.gen_range(-20i32..20) as f64 * 0.5;
        let n = rng.gen_range(1..60);
        let nodes: Vec<Point> = (0..n).map(|_| [grid(&mut rng), grid(&mut rng)]).collect();
        let p = [grid(&mut rng), grid(&mut rng)];
        if nearest_node(&nodes, p) != brute_nearest(&nodes, p) {
            bad.push(format!("nearest_node #{case}"));
        }

        let lanes = rng.gen_range(1..8);
        let heads = rng.gen_range(1..8);
        let k = rng.gen_range(1..10);
        let quant = |rng: &mut ChaCha8Rng| rng.gen_range(1..6) as f64;
        let lane_raw: Vec<f64> = (0..lanes).map(|_| quant(&mut rng)).collect();
        let ls: f64 = lane_raw.iter().sum();
        let lane: Vec<f64> = lane_raw.iter().map(|v| v / ls).collect();
        let traj: Vec<Vec<f64>> = (0..lanes)
            .map(|_| {
                let raw: Vec<f64> = (0..heads).map(|_| quant(&mut rng)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        if combine_and_pick(&lane, &traj, k) != brute_pick(&lane, &traj, k) {
            bad.push(format!("combine_and_pick #{case}"));
        }

        let kk = rng.gen_range(1..8);
        let gt: Vec<Point> = (0..TF)
            .map(|_| [rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0)])
            .collect();
        let preds: Vec<Vec<Point>> = (0..kk)
            .map(|_| {
                (0..TF)
                    .map(|_| [rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0)])
                    .collect()
            })
            .collect();
        let m = min_ade_fde(&preds, &gt);
        if (m.min_ade, m.min_fde) != brute_min_ade_fde(&preds, &gt) {
            bad.push(format!("min_ade_fde #{case}"));
        }
    }
    check(
        bad.is_empty(),
        format!(
            "3 x 1000 instances, {} mismatches {:?}",
            bad.len(),
            bad.iter().take(3).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------- 4

fn lane_values(model: &JalMtp, ps: &ParamStore, prep: &Prepared) -> Vec<Vec<f64>> {
    let mut t = Tape::new();
    let lanes = model.instance_lanes(&mut t, ps, prep).unwrap();
    lanes.iter().map(|&v| t.value(v).data().to_vec()).collect()
}

/// Agent driving parallel to a lane node, `offset` meters to its side.
fn agent_near(nodes: &[Point], at: usize, offset: f64, speed: f64) -> Vec<Point> {
    let a = nodes[at.min(nodes.len() - 2)];
    let b = nodes[at.min(nodes.len() - 2) + 1];
    let len = dist(a, b).max(1e-9);
    let t = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
    let base = [a[0] - t[1] * offset, a[1] + t[0] * offset];
    (0..TP)
        .map(|i| {
            let s = speed * DT * (i as f64 - (TP - 1) as f64);
            [base[0] + t[0] * s, base[1] + t[1] * s]
        })
        .collect()
}

fn s2l_locality() -> Outcome {
    let cfg = ExperimentConfig::default();
    let (model, ps) = JalMtp::new(ModelConfig::from(&cfg), 5);
    let scenes = gen_synthetic(&mix("straight,fork,intersection,congestion"), 24, 31);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut perms, mut isolated, mut influenced) = (0, 0, 0);
    for s in &scenes {
        let base = prepare(s, &model.cfg).map_err(|e| e.to_string())?;
        let reference = lane_values(&model, &ps, &base);

        let mut shuffled = s.clone();
        shuffled.social_pasts.shuffle(&mut rng);
        shuffled.social_pasts.reverse();
        let p = prepare(&shuffled, &model.cfg).unwrap();
        if lane_values(&model, &ps, &p) != reference {
            return Err(format!(
                "{}: permuting agents changed an instance lane",
                s.scene_id
            ));
        }
        perms += 1;

        // one extra agent next to a random lane, in the agent frame
        let j = rng.gen_range(0..base.num_lanes());
        let node = rng.gen_range(0..base.lanes[j].len());
        let offset = rng.gen_range(-6.0..6.0);
        let local = agent_near(&base.lanes[j], node, offset, rng.gen_range(0.0..12.0));
        let mut extra = s.clone();
        extra.social_pasts.push(base.transform.map_world(&local));
        let p = prepare(&extra, &model.cfg).unwrap();
        let after = lane_values(&model, &ps, &p);
        let new_agent = p.social.len() - 1;
        for (i, rel) in p.relatedness.iter().enumerate() {
            let far = (0..base.lanes[i].len())
                .all(|h| rel.min_dist[h * rel.num_agents + new_agent] > cfg.s2l_threshold);
            if far {
                if after[i] != reference[i] {
                    return Err(format!(
                        "{}: agent far from lane {i} changed it",
                        s.scene_id
                    ));
                }
                isolated += 1;
            } else if after[i] != reference[i] {
                influenced += 1;
            }
        }
    }
    check(
        isolated > 0 && influenced > 0,
        format!("{perms} permutations bit-identical; {isolated} far-agent lanes bit-identical, {influenced} near-agent lanes changed"),
    )
}

// ---------------------------------------------------------------- 5

fn overfit() -> (Outcome, Outcome) {
    let cfg = ExperimentConfig {
        steps: 2000,
        ..Default::default()
    };
    let scenes = gen_synthetic(&mix("straight:1,fork:1"), 32, 7);
    let (tr, log, elapsed) = train(cfg, &scenes);
    let data = prepare_training(&scenes, &tr.model.cfg);
    let (mut ade, mut fde) = (0.0, 0.0);
    for p in &data {
        let inf = tr.model.infer(&tr.params, p).unwrap();
        let m = min_ade_fde(&inf.picked_local(), p.gt.as_ref().unwrap());
        ade += m.min_ade;
        fde += m.min_fde;
    }
    let n = data.len() as f64;
    let (ade, fde) = (ade / n, fde / n);
    let secs = elapsed.as_secs_f64();
    let crit = check(
        ade < 0.5 && fde < 1.0 && secs < 600.0,
        format!(
            "minADE {ade:.3} minFDE {fde:.3} on {} scenes, 2000 steps in {secs:.0}s",
            data.len()
        ),
    );
    let tail = &log[log.len() - 100..];
    let reg = tail.iter().map(|l| l.reg).sum::<f64>() / tail.len() as f64;
    let extra = check(
        reg < 0.3,
        format!("mean L_reg over the last 100 steps {reg:.3} m"),
    );
    (crit, extra)
}

// ---------------------------------------------------------------- 6

fn multimodality() -> Outcome {
    let cfg = ExperimentConfig {
        steps: 2000,
        ..Default::default()
    };
    let train_set = gen_synthetic(&mix("fork"), 200, 100);
    let (tr, _, _) = train(cfg, &train_set);
    let held = gen_forks_with_branch_ends(20, 101);
    let mut both = 0;
    for (s, ends) in &held {
        let prep = prepare(s, &tr.model.cfg).unwrap();
        let inf = tr.model.infer(&tr.params, &prep).unwrap();
        let covers = |e: Point| inf.world.iter().any(|tr| dist(tr[TF - 1], e) <= 3.0);
        if covers(ends[0]) && covers(ends[1]) {
            both += 1;
        }
    }
    check(
        both * 10 >= held.len() * 9,
        format!(
            "{both}/{} held-out forks cover both branch endpoints within 3 m",
            held.len()
        ),
    )
}

// ---------------------------------------------------------------- 7, 8

fn final_second_speed(traj: &[Point]) -> f64 {
    let last = &traj[TF - 11..];
    let len: f64 = last.windows(2).map(|w| dist(w[0], w[1])).sum();
    len / (10.0 * DT)
}

fn congestion_and_horizon() -> (Outcome, Outcome) {
    let train_mix = mix("straight:1,congestion:1,fork:1");
    let cfg = ExperimentConfig {
        steps: 2000,
        template_mix: train_mix.to_string(),
        ..Default::default()
    };
    let train_set = gen_synthetic(&train_mix, 200, 200);
    let (tr, _, _) = train(cfg, &train_set);

    let (mut jam, mut free) = (0.0, 0.0);
    let mut slower = 0;
    let pairs = 20;
    for i in 0..pairs {
        let (c, f) = gen_congestion_pair(201, i);
        let top = |s: &Scene| {
            let prep = prepare(s, &tr.model.cfg).unwrap();
            let inf = tr.model.infer(&tr.params, &prep).unwrap();
            final_second_speed(&inf.world[0])
        };
        let (vc, vf) = (top(&c), top(&f));
        jam += vc;
        free += vf;
        if vc <= 0.7 * vf {
            slower += 1;
        }
    }
    let ratio = jam / free;
    let congestion = check(
        ratio <= 0.7,
        format!(
            "top trajectory final-second speed {:.2} vs {:.2} m/s (ratio {ratio:.2}); {slower}/{pairs} pairs individually >= 30% slower",
            jam / pairs as f64,
            free / pairs as f64
        ),
    );

    let held = gen_synthetic(&train_mix, 60, 202);
    let report = evaluate(&tr.model, &tr.params, &held);
    let (a5, a30) = (report.horizon_ade[4], report.horizon_ade[TF - 1]);
    let horizon = check(
        report.horizon_ade.len() == TF
            && report.horizon_fde.len() == TF
            && a30 > a5
            && report.scenes > 0,
        format!(
            "minADE@5 {a5:.3} < minADE@30 {a30:.3} on {} held-out scenes, {} horizons",
            report.scenes,
            report.horizon_ade.len()
        ),
    );
    (congestion, horizon)
}

// ---------------------------------------------------------------- 9

fn determinism() -> Outcome {
    let cfg = ExperimentConfig {
        d: 32,
        steps: 6,
        batch_size: 4,
        ..Default::default()
    };
    let scenes = gen_synthetic(&mix("straight,fork,congestion"), 12, 9);
    let (tr_a, log_a, _) = train(cfg.clone(), &scenes);
    let (_, log_b, _) = train(cfg, &scenes);
    if log_a != log_b {
        return Err("loss logs differ between identical runs".into());
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("probe.ckpt");
    Checkpoint::from_trainer(&tr_a)
        .save(&path)
        .map_err(|e| e.to_string())?;
    let (m, ps) = Checkpoint::load(&path)
        .and_then(|c| c.model())
        .map_err(|e| e.to_string())?;
    let probe = prepare(&scenes[1], &m.cfg).unwrap();
    let a = tr_a.model.infer(&tr_a.params, &probe).unwrap();
    let b = m.infer(&ps, &probe).unwrap();
    let same = a.candidates == b.candidates
        && a.lane_probs == b.lane_probs
        && a.traj_probs == b.traj_probs
        && a.world == b.world
        && a.pick == b.pick;
    check(
        same,
        format!(
            "{} logged steps identical; reloaded checkpoint forward pass bit-identical: {same}",
            log_a.len()
        ),
    )
}

fn main() -> ExitCode {
    // optional arguments select criteria by number, e.g. `-- 1 9`
    let only: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let wanted = |n: &str| only.is_empty() || only.iter().any(|o| o == n);
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut run = |name: &'static str, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let r = f();
        let line = match &r {
            Ok(d) => format!("PASS  {name}: {d}"),
            Err(d) => format!("FAIL  {name}: {d}"),
        };
        println!("{line}  [{:.0}s]", start.elapsed().as_secs_f64());
        results.push((name, r));
    };
    if wanted("1") {
        run("1 gradient integrity", &gradients);
    }
    if wanted("2") {
        run("2 normalization", &normalization);
    }
    if wanted("3") {
        run("3 oracle equivalence", &oracles);
    }
    if wanted("4") {
        run("4 S2L locality and symmetry", &s2l_locality);
    }
    if wanted("5") {
        let (c5, reg) = overfit();
        run("5 overfit", &|| c5.clone());
        run("5 overfit, training L_reg", &|| reg.clone());
    }
    if wanted("6") {
        run("6 multimodality", &multimodality);
    }
    if wanted("7") || wanted("8") {
        let (c7, c8) = congestion_and_horizon();
        run("7 congestion", &|| c7.clone());
        run("8 horizon behavior", &|| c8.clone());
    }
    if wanted("9") {
        run("9 determinism and persistence", &determinism);
    }
    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
