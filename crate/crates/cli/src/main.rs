use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use lanepred::checkpoint::Checkpoint;
use lanepred::config::ExperimentConfig;
use lanepred::eval::{
    evaluate_predictions, load_predictions, predict_scenes, save_predictions, write_report,
};
use lanepred::plot::plot;
use lanepred::scene::{load_scenes, save_scenes};
use lanepred::synth::{gen_synthetic, TemplateMix};
use lanepred::train::{prepare_training, Trainer};

#[derive(Parser)]
#[command(
    name = "lanepred",
    version,
    about = "Lane-conditioned multimodal trajectory prediction"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic scenes.
    Gen {
        #[arg(
            long,
            default_value = "straight:1,curve:1,fork:1,intersection:1,congestion:1"
        )]
        template_mix: String,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a config file; writes a checkpoint and a loss log next to it.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `data_path` in the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write top-K world-frame predictions, one JSON line per scene.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 6)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict and score; writes `<report>.txt` and `<report>.json`.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Render one scene with its predictions as SVG.
    Plot {
        #[arg(long)]
        scene_id: String,
        /// Prediction file from `predict`; omit to draw the scene alone.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Scene file holding `scene_id`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_default_env()
        .filter_level(log::LevelFilter::Info)
        .parse_default_env()
        .init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen {
            template_mix,
            count,
            seed,
            out,
        } => {
            let mix: TemplateMix = template_mix.parse()?;
            let scenes = gen_synthetic(&mix, count, seed);
            save_scenes(&out, &scenes)?;
            log::info!("wrote {} scenes to {}", scenes.len(), out.display());
        }
        Cmd::Train { config, data, out } => train(&config, data, &out)?,
        Cmd::Predict { ckpt, data, k, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let (model, ps) = ck.model()?;
            let scenes = load_scenes(&data)?;
            let preds = predict_scenes(&model, &ps, &scenes, k);
            let failed = preds.iter().filter(|p| p.error.is_some()).count();
            save_predictions(&out, &preds)?;
            log::info!("{} scenes predicted, {failed} failed", preds.len() - failed);
        }
        Cmd::Eval { ckpt, data, report } => {
            let ck = Checkpoint::load(&ckpt)?;
            let (model, ps) = ck.model()?;
            let scenes = load_scenes(&data)?;
            let k = model.cfg.k;
            let rep = evaluate_predictions(&scenes, &predict_scenes(&model, &ps, &scenes, k), k);
            write_report(&rep, &report)?;
            print!("{}", rep.to_table());
        }
        Cmd::Plot {
            scene_id,
            pred,
            data,
            out,
        } => {
            let scenes = load_scenes(&data)?;
            let Some(scene) = scenes.iter().find(|s| s.scene_id == scene_id) else {
                bail!("scene `{scene_id}` not found in {}", data.display());
            };
            let (trajs, probs) = match pred {
                Some(p) => {
                    let preds = load_predictions(&p)?;
                    match preds.into_iter().find(|r| r.scene_id == scene_id) {
                        Some(r) => (r.trajectories, r.probs),
                        None => bail!("no prediction for `{scene_id}` in {}", p.display()),
                    }
                }
                None => (Vec::new(), Vec::new()),
            };
            plot(scene, &trajs, &probs, &out)?;
        }
    }
    Ok(())
}

fn train(config: &Path, data: Option<PathBuf>, out: &Path) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if data.is_some() {
        cfg.data_path = data;
    }
    let Some(data_path) = &cfg.data_path else {
        bail!("no training data: pass --data or set data_path in the config");
    };
    let scenes = load_scenes(data_path)?;
    let steps = cfg.steps;
    let mut tr = Trainer::new(cfg)?;
    let prepared = prepare_training(&scenes, &tr.model.cfg);
    if prepared.is_empty() {
        bail!("no usable training scenes");
    }
    let log_path = out.with_extension("loss.jsonl");
    let mut log_file =
        BufWriter::new(File::create(&log_path).with_context(|| log_path.display().to_string())?);
    let mut write_err = None;
    tr.run(&prepared, steps, |l| {
        if l.step % 100 == 0 {
            log::info!("step {} loss {:.4} reg {:.4}", l.step, l.loss, l.reg);
        }
        let line = serde_json::to_string(l).expect("step log serializes");
        if let Err(e) = writeln!(log_file, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context(log_path.display().to_string());
    }
    log_file.flush()?;
    Checkpoint::from_trainer(&tr).save(out)?;
    log::info!("checkpoint written to {}", out.display());
    Ok(())
}
