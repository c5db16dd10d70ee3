//! Trains on a small straight/fork set and reports training-set error.
//!
//! `cargo run --release -p lanepred-core --example overfit -- [steps] [scenes] [mix]`

use std::time::Instant;

use lanepred::config::ExperimentConfig;
use lanepred::metrics::min_ade_fde;
use lanepred::synth::{gen_synthetic, TemplateMix};
use lanepred::train::{prepare_training, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map_or(Ok(200), |s| s.parse())?;
    let count: usize = args.get(2).map_or(Ok(32), |s| s.parse())?;
    let mix: TemplateMix = args
        .get(3)
        .map_or("straight:1,fork:1", |s| s.as_str())
        .parse()?;
    let scenes = gen_synthetic(&mix, count, 7);
    let mut tr = Trainer::new(ExperimentConfig::default())?;
    let data = prepare_training(&scenes, &tr.model.cfg);
    let start = Instant::now();
    tr.run(&data, steps, |l| {
        if l.step % 50 == 0 {
            println!(
                "step {:5} loss {:8.4} reg {:7.4} lane {:6.4} traj {:6.4}  {:6.1}s",
                l.step,
                l.loss,
                l.reg,
                l.lane_ce,
                l.traj_ce,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    let (mut ade, mut fde) = (0.0, 0.0);
    for p in &data {
        let inf = tr.model.infer(&tr.params, p)?;
        let m = min_ade_fde(&inf.picked_local(), p.gt.as_ref().unwrap());
        ade += m.min_ade;
        fde += m.min_fde;
    }
    let n = data.len() as f64;
    println!(
        "minADE {:.3} minFDE {:.3} over {} scenes, {:.1}s",
        ade / n,
        fde / n,
        data.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
