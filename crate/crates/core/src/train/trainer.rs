//! Mini-batch training with step decay and progressive branch growth.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::Adam;
use super::checkpoint::Checkpoint;
use super::evaluate::{evaluate, mean_scores};
use super::schedule::{Phase, Schedule};
use crate::error::{Error, Result};
use crate::network::{LossConfig, Model, ModelConfig};
use crate::synth::{sample_patch, Dataset, ImagePair};
use crate::tensor::Tensor;

/// Adds a branch with `cdr_count` blocks at the start of global epoch `epoch`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Growth {
    pub epoch: usize,
    pub cdr_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub patch: usize,
    /// Base-phase epochs; finetune epochs follow them.
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub schedule: Schedule,
    pub grow_plan: Vec<Growth>,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 4,
            patch: 32,
            epochs: 10,
            finetune_epochs: 0,
            schedule: Schedule::default(),
            grow_plan: Vec::new(),
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn total_epochs(&self) -> usize {
        self.epochs + self.finetune_epochs
    }

    /// Phase and phase-local epoch for a global epoch.
    pub fn phase_of(&self, epoch: usize) -> (Phase, usize) {
        if epoch < self.epochs {
            (Phase::Base, epoch)
        } else {
            (Phase::Finetune, epoch - self.epochs)
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let (phase, local) = self.phase_of(epoch);
        self.schedule.lr_at(local, phase)
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch == 0 || self.patch == 0 {
            return Err(Error::Config("batch and patch must be positive".into()));
        }
        self.schedule.validate()?;
        if !(self.loss.eps > 0.0) {
            return Err(Error::Config(format!("loss eps must be positive, got {}", self.loss.eps)));
        }
        let mut cfg = model.clone();
        cfg.check_input(self.patch, self.patch)?;
        let mut plan = self.grow_plan.clone();
        plan.sort_by_key(|g| g.epoch);
        for g in plan {
            cfg = cfg.grown(g.cdr_count)?;
            cfg.check_input(self.patch, self.patch).map_err(|e| {
                Error::Config(format!("after growth at epoch {}: {e}", g.epoch))
            })?;
        }
        Ok(())
    }
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Mean PSNR over the validation split; absent when the split is empty.
    pub val_psnr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<EpochLog>,
    /// Loss of every step, measured before its update.
    pub step_losses: Vec<f64>,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_psnr";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{LOG_HEADER}\n");
        for r in &self.rows {
            let val = r.val_psnr.map(|v| format!("{v:.6}")).unwrap_or_default();
            s.push_str(&format!("{},{:e},{:.9},{}\n", r.epoch, r.lr, r.train_loss, val));
        }
        s
    }
}

/// Training state: the checkpoint being trained and the log so far.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub state: Checkpoint,
    pub log: TrainLog,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

impl Trainer {
    /// Fresh model from `model_cfg`.
    pub fn new(model_cfg: &ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate(model_cfg)?;
        let model = Model::new(model_cfg)?;
        let optim = Adam::new(cfg.lr_at(0));
        Ok(Trainer {
            state: Checkpoint { model, optim, epoch: 0 },
            cfg,
            log: TrainLog::default(),
        })
    }

    /// Continues from a saved state; growths scheduled before its epoch are
    /// assumed to be already part of its configuration.
    pub fn resume(state: Checkpoint, cfg: TrainConfig) -> Result<Self> {
        if cfg.batch == 0 || cfg.patch == 0 {
            return Err(Error::Config("batch and patch must be positive".into()));
        }
        cfg.schedule.validate()?;
        state.model.config().check_input(cfg.patch, cfg.patch)?;
        Ok(Trainer {
            state,
            cfg,
            log: TrainLog::default(),
        })
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.cfg.batch)
    }

    /// Patches for one step: wrap-around over the epoch's permutation.
    fn batch(&self, pairs: &[ImagePair], order: &[usize], step: usize, crop_seeds: &[u64]) -> Result<(Tensor, Tensor)> {
        let b = self.cfg.batch;
        let mut inputs = Vec::with_capacity(b);
        let mut targets = Vec::with_capacity(b);
        for j in 0..b {
            let k = step * b + j;
            let pair = &pairs[order[k % order.len()]];
            let p = sample_patch(pair, self.cfg.patch, crop_seeds[j])?;
            inputs.push(p.moire);
            targets.push(p.clean);
        }
        Ok((Tensor::stack(&inputs)?, Tensor::stack(&targets)?))
    }

    /// Runs every remaining epoch. `on_epoch` sees each log row as it is
    /// produced. On divergence the state is rolled back to the start of the
    /// failing epoch and [`Error::Divergence`] is returned.
    pub fn run(&mut self, data: &Dataset, mut on_epoch: impl FnMut(&EpochLog)) -> Result<()> {
        if data.train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        while self.state.epoch < self.cfg.total_epochs() {
            let epoch = self.state.epoch;
            let snapshot = self.state.clone();
            let logged = self.log.step_losses.len();
            match self.run_epoch(data, epoch) {
                Ok(row) => {
                    self.state.epoch += 1;
                    self.log.rows.push(row);
                    on_epoch(&row);
                }
                Err(e) => {
                    self.log.step_losses.truncate(logged);
                    self.state = snapshot;
                    return Err(match e {
                        Error::NonFinite(message) => Error::Divergence { epoch, message },
                        other => other,
                    });
                }
            }
        }
        Ok(())
    }

    /// Applies the growths scheduled for `epoch`.
    pub fn grow_for(&mut self, epoch: usize) -> Result<()> {
        for g in self.cfg.grow_plan.iter().filter(|g| g.epoch == epoch) {
            self.state.model.grow(g.cdr_count)?;
            self.state.model.config().check_input(self.cfg.patch, self.cfg.patch)?;
        }
        Ok(())
    }

    fn run_epoch(&mut self, data: &Dataset, epoch: usize) -> Result<EpochLog> {
        self.grow_for(epoch)?;
        let lr = self.cfg.lr_at(epoch);
        self.state.optim.lr = lr;

        let mut rng = epoch_rng(self.cfg.seed, epoch);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let steps = self.steps_per_epoch(data.train.len());
        let mut total = 0.0;
        for step in 0..steps {
            let crop_seeds: Vec<u64> = (0..self.cfg.batch).map(|_| rng.gen()).collect();
            let (x, y) = self.batch(&data.train, &order, step, &crop_seeds)?;
            let model = &mut self.state.model;
            let (loss, grads) = model.net.loss_and_grads(&model.params, &x, &y, &self.cfg.loss)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss is {loss} at step {step}")));
            }
            self.state.optim.step(&mut model.params, &grads)?;
            self.log.step_losses.push(loss);
            total += loss;
        }
        let val_psnr = if data.val.is_empty() {
            None
        } else {
            Some(mean_scores(&evaluate(&self.state.model, &data.val)?).output_psnr)
        };
        Ok(EpochLog {
            epoch,
            lr,
            train_loss: total / steps as f64,
            val_psnr,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_dataset, procedural_sources, SpecRanges};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            branches: 2,
            channels: 4,
            cdr_counts: vec![0, 1],
            attention_reduction: 4,
            ..ModelConfig::desk()
        }
    }

    fn tiny_data(n: usize) -> Dataset {
        let sources = procedural_sources(4, 16, 16, 3).unwrap();
        make_dataset(&sources, &SpecRanges::default(), n, 5).unwrap()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            batch: 2,
            patch: 8,
            epochs,
            schedule: Schedule {
                initial_lr: 1e-3,
                decay_every: 2,
                ..Schedule::default()
            },
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let mut t = Trainer::new(&tiny_model(), cfg(0)).unwrap();
        let fresh = Model::new(&tiny_model()).unwrap();
        t.run(&tiny_data(4), |_| {}).unwrap();
        assert!(t.log.rows.is_empty());
        assert_eq!(t.log.to_csv(), format!("{LOG_HEADER}\n"));
        assert_eq!(t.state.epoch, 0);
        for ((_, a), (_, b)) in t.state.model.params.iter().zip(fresh.params.iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn logs_one_row_per_epoch_with_scheduled_rates() {
        let mut t = Trainer::new(&tiny_model(), cfg(3)).unwrap();
        let mut seen = Vec::new();
        t.run(&tiny_data(5), |r| seen.push(r.epoch)).unwrap();
        assert_eq!(seen, vec![0, 1, 2]);
        let lrs: Vec<f64> = t.log.rows.iter().map(|r| r.lr).collect();
        assert_eq!(lrs, vec![1e-3, 1e-3, 1e-4]);
        // 5 pairs: 4 train, batch 2
        assert_eq!(t.log.step_losses.len(), 6);
        assert!(t.log.rows.iter().all(|r| r.val_psnr.is_some()));
        let csv = t.log.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(3).unwrap().starts_with("2,1e-4,"));
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_data(4);
        let run = || {
            let mut t = Trainer::new(&tiny_model(), cfg(2)).unwrap();
            t.run(&data, |_| {}).unwrap();
            t.state.to_bytes().unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = tiny_data(4);
        let mut full = Trainer::new(&tiny_model(), cfg(3)).unwrap();
        full.run(&data, |_| {}).unwrap();

        let mut first = Trainer::new(&tiny_model(), cfg(3)).unwrap();
        first.cfg.epochs = 2;
        first.run(&data, |_| {}).unwrap();
        let saved = Checkpoint::from_bytes(&first.state.to_bytes().unwrap()).unwrap();
        let mut second = Trainer::resume(saved, cfg(3)).unwrap();
        second.run(&data, |_| {}).unwrap();
        assert_eq!(second.log.rows.len(), 1);
        assert_eq!(second.log.rows[0].epoch, 2);
        assert_eq!(second.log.rows[0].lr, cfg(3).lr_at(2));
        // the resumed run restarts from single-precision parameters
        let a = full.state.model.forward(&data.val[0].moire).unwrap();
        let b = second.state.model.forward(&data.val[0].moire).unwrap();
        let worst = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn growth_carries_parameters_over_bitwise() {
        let base = ModelConfig {
            branches: 1,
            cdr_counts: vec![0],
            ..tiny_model()
        };
        let mut c = cfg(3);
        c.grow_plan = vec![Growth { epoch: 1, cdr_count: 2 }];
        let data = tiny_data(4);
        let mut t = Trainer::new(&base, c).unwrap();
        t.cfg.epochs = 1;
        t.run(&data, |_| {}).unwrap();
        let before = t.state.model.params.clone();
        t.grow_for(1).unwrap();
        assert_eq!(t.state.model.config().branches, 2);
        for (name, tensor) in before.iter() {
            assert_eq!(t.state.model.params.by_name(name).unwrap().data(), tensor.data(), "{name}");
        }

        let mut whole = Trainer::new(&base, t.cfg.clone()).unwrap();
        whole.cfg.epochs = 3;
        whole.run(&data, |_| {}).unwrap();
        assert_eq!(whole.state.model.config().cdr_counts, vec![0, 2]);
        assert_eq!(whole.state.optim.t.len(), whole.state.model.params.len());
        assert!(whole.log.rows.iter().all(|r| r.train_loss.is_finite()));
    }

    #[test]
    fn divergence_restores_epoch_start() {
        let data = tiny_data(4);
        let mut t = Trainer::new(&tiny_model(), cfg(2)).unwrap();
        let id = t.state.model.params.ids().next().unwrap();
        t.state.model.params.get_mut(id).data_mut()[0] = f64::NAN;
        let before = t.state.model.params.get(id).data()[1];
        let err = t.run(&data, |_| {}).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 0, .. }), "{err}");
        assert_eq!(t.state.epoch, 0);
        assert!(t.log.rows.is_empty());
        assert_eq!(t.state.model.params.get(id).data()[1], before);
    }

    #[test]
    fn rejects_patch_that_growth_makes_indivisible() {
        let mut c = cfg(2);
        c.patch = 4;
        assert!(Trainer::new(&tiny_model(), c.clone()).is_ok());
        c.grow_plan = vec![Growth { epoch: 1, cdr_count: 2 }];
        assert!(matches!(Trainer::new(&tiny_model(), c), Err(Error::Config(_))));
    }
}
