//! Mini-batch training loop.

use lanepred_autodiff::{Adam, ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::{prepare, JalMtp, ModelConfig, Prepared};
use crate::scene::Scene;

/// Batch-order stream, kept apart from the initialization stream.
const SHUFFLE_STREAM: u64 = 0x5eed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub reg: f64,
    pub lane_ce: f64,
    pub traj_ce: f64,
    pub scenes: usize,
}

pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub model: JalMtp,
    pub params: ParamStore,
    pub adam: Adam,
    pub step: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

/// Prepares training scenes, dropping (with a warning) those without
/// proposals, without ground truth, or with fully ambiguous lane labels.
pub fn prepare_training(scenes: &[Scene], cfg: &ModelConfig) -> Vec<Prepared> {
    let mut out = Vec::with_capacity(scenes.len());
    for s in scenes {
        match prepare(s, cfg) {
            Ok(p) if p.gt.is_none() => log::warn!("skipping {}: no ground truth", p.scene_id),
            Ok(p) => match p.skip_reason() {
                Some(why) => log::warn!("skipping {}: {why}", p.scene_id),
                None => out.push(p),
            },
            Err(e) => log::warn!("skipping {}: {e}", s.scene_id),
        }
    }
    out
}

impl Trainer {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let (model, params) = JalMtp::new(ModelConfig::from(&cfg), cfg.seed);
        let adam = Adam::new(&params, cfg.learning_rate);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SHUFFLE_STREAM);
        Ok(Trainer {
            cfg,
            model,
            params,
            adam,
            step: 0,
            order: Vec::new(),
            cursor: 0,
            rng,
        })
    }

    /// Next batch of indices; epochs are reshuffled and never straddled.
    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let bs = self.cfg.batch_size.min(n);
        if self.order.len() != n || self.cursor + bs > n {
            self.order = (0..n).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let b = self.order[self.cursor..self.cursor + bs].to_vec();
        self.cursor += bs;
        b
    }

    /// Averaged gradient of the loss over `batch`, one tape per scene.
    pub fn batch_gradients(&self, batch: &[&Prepared]) -> Result<(Vec<Option<Tensor>>, StepLog)> {
        let mut acc: Vec<Tensor> = self
            .params
            .iter()
            .map(|(_, _, v)| Tensor::new(v.shape().to_vec(), vec![0.0; v.len()]).expect("shape"))
            .collect();
        let mut log = StepLog {
            step: self.step,
            loss: 0.0,
            reg: 0.0,
            lane_ce: 0.0,
            traj_ce: 0.0,
            scenes: batch.len(),
        };
        for prep in batch {
            let mut t = Tape::new();
            let parts = self.model.loss(
                &mut t,
                &self.params,
                prep,
                self.cfg.lambda1,
                self.cfg.lambda2,
            )?;
            let total = t.value(parts.total).item();
            if !total.is_finite() {
                return Err(Error::Invalid(format!(
                    "non-finite loss on {}",
                    prep.scene_id
                )));
            }
            log.loss += total;
            log.reg += parts.reg;
            log.lane_ce += parts.lane_ce;
            log.traj_ce += parts.traj_ce;
            let g = t.backward(parts.total)?;
            for (id, gt) in g.params() {
                for (a, b) in acc[id.index()].data_mut().iter_mut().zip(gt.data()) {
                    *a += b;
                }
            }
        }
        let inv = 1.0 / batch.len() as f64;
        for a in &mut acc {
            a.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        log.loss *= inv;
        log.reg *= inv;
        log.lane_ce *= inv;
        log.traj_ce *= inv;
        Ok((acc.into_iter().map(Some).collect(), log))
    }

    pub fn train_step(&mut self, data: &[Prepared]) -> Result<StepLog> {
        if data.is_empty() {
            return Err(Error::Invalid("no usable training scenes".into()));
        }
        let idx = self.next_batch(data.len());
        let batch: Vec<&Prepared> = idx.iter().map(|&i| &data[i]).collect();
        let (grads, log) = self.batch_gradients(&batch)?;
        self.adam.step(&mut self.params, &grads)?;
        self.step += 1;
        Ok(log)
    }

    /// Runs `steps` optimizer steps, calling `on_step` after each.
    pub fn run(
        &mut self,
        data: &[Prepared],
        steps: usize,
        mut on_step: impl FnMut(&StepLog),
    ) -> Result<Vec<StepLog>> {
        let mut logs = Vec::with_capacity(steps);
        for _ in 0..steps {
            let l = self.train_step(data)?;
            on_step(&l);
            logs.push(l);
        }
        Ok(logs)
    }
}
