//! Two-phase training with early stopping.

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{aux_graph, loss_aux, loss_mse, loss_nll, mse_graph, nll_graph};
use super::model::{ImuWindow, MoeModel};
use super::routing::Capacity;
use crate::diffkernel::{Adam, AdamConfig, Binder, Tape};
use crate::error::{Error, Result};

/// One training pair: an input window and the body-frame velocity at its
/// last epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Time of the window's last epoch, s.
    pub t: f64,
    pub window: ImuWindow,
    pub target: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Epoch cap for each phase.
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 200,
            patience: 5,
            min_delta: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(format!("train.lr must be positive (got {})", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::InvalidConfig(
                "train.batch_size, train.max_epochs and train.patience must be positive".into(),
            ));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::InvalidConfig(format!("train.min_delta must be non-negative (got {})", self.min_delta)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// `L_MSE + λ·L_aux`
    Mse,
    /// `L_NLL + λ·L_aux`
    Nll,
}

impl Phase {
    pub fn index(self) -> usize {
        match self {
            Phase::Mse => 1,
            Phase::Nll => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub aux: f64,
    pub importance: Vec<f64>,
    pub load: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    /// Mean objective over the epoch's batches.
    pub train_loss: f64,
    pub train_aux: f64,
    pub val_mse: f64,
    pub val_nll: f64,
    pub importance: Vec<f64>,
    pub load: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch of each phase whose parameters were kept.
    pub best_epoch: [usize; 2],
}

impl TrainLog {
    pub fn phase_epochs(&self, phase: Phase) -> usize {
        self.epochs.iter().filter(|e| e.phase == phase).count()
    }
}

/// Validation metrics with per-sample (unbounded) routing.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub mse: f64,
    pub nll: f64,
    pub predictions: Vec<Vector3<f64>>,
    pub variances: Vec<Vector3<f64>>,
}

pub fn evaluate(model: &MoeModel, data: &[Sample], chunk: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let mut predictions = Vec::with_capacity(data.len());
    let mut variances = Vec::with_capacity(data.len());
    for part in data.chunks(chunk.max(1)) {
        let windows: Vec<ImuWindow> = part.iter().map(|s| s.window.clone()).collect();
        let (est, _) = model.predict(&windows, Capacity::Unbounded)?;
        predictions.extend(est.iter().map(|e| e.v_b));
        variances.extend(est.iter().map(|e| e.sigma_diag));
    }
    let targets: Vec<_> = data.iter().map(|s| s.target).collect();
    Ok(Evaluation {
        mse: loss_mse(&targets, &predictions)?,
        nll: loss_nll(&targets, &predictions, &variances)?,
        predictions,
        variances,
    })
}

/// Single-writer optimizer loop around a model.
pub struct Trainer<'m> {
    model: &'m mut MoeModel,
    adam: Adam,
    cfg: TrainConfig,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m mut MoeModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
            model.params(),
        );
        Ok(Trainer { model, adam, cfg })
    }

    pub fn model(&self) -> &MoeModel {
        self.model
    }

    fn reset_optimizer(&mut self) {
        self.adam = Adam::new(
            AdamConfig {
                lr: self.cfg.lr,
                ..AdamConfig::default()
            },
            self.model.params(),
        );
    }

    /// One gradient step on `batch`.
    pub fn step(&mut self, batch: &[Sample], phase: Phase) -> Result<StepStats> {
        let windows: Vec<ImuWindow> = batch.iter().map(|s| s.window.clone()).collect();
        let targets: Vec<Vector3<f64>> = batch.iter().map(|s| s.target).collect();
        let lambda = self.model.config().aux_weight;

        let mut tape = Tape::new();
        let mut bind = Binder::new(self.model.params());
        let out = self.model.forward(&mut tape, &mut bind, &windows, Capacity::Batch)?;
        let main = match phase {
            Phase::Mse => mse_graph(&mut tape, out.velocity, &targets)?,
            Phase::Nll => nll_graph(&mut tape, out.velocity, out.log_var, &targets)?,
        };
        let aux = aux_graph(&mut tape, out.probs, &out.decision)?;
        let weighted = tape.scale(aux, lambda);
        let loss = tape.add(main, weighted)?;
        let value = tape.value(loss)[0];
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged in phase {} after {} steps (loss = {value})",
                phase.index(),
                self.adam.steps()
            )));
        }
        let grads = tape.backward(loss)?;
        let mut flat = vec![Vec::new(); self.model.params().len()];
        bind.collect_grads(&grads, &mut flat);
        drop(bind);
        self.adam.apply(self.model.params_mut(), &flat);
        Ok(StepStats {
            loss: value,
            aux: loss_aux(&out.decision),
            importance: out.decision.importance.clone(),
            load: out.decision.load.clone(),
        })
    }

    /// Trains one phase to convergence; the best validation parameters are
    /// restored before returning.
    pub fn run_phase(&mut self, train: &[Sample], val: &[Sample], phase: Phase, log: &mut TrainLog) -> Result<()> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Data("training and validation sets must be non-empty".into()));
        }
        self.reset_optimizer();
        let n = self.model.config().n_experts;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(phase.index() as u64));
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut best = (f64::INFINITY, self.model.params().clone(), 0);
        let mut stale = 0;

        for epoch in 1..=self.cfg.max_epochs {
            order.shuffle(&mut rng);
            let (mut loss_sum, mut aux_sum, mut batches) = (0.0, 0.0, 0);
            let mut importance = vec![0.0; n];
            let mut load = vec![0usize; n];
            for idx in order.chunks(self.cfg.batch_size) {
                let batch: Vec<Sample> = idx.iter().map(|&i| train[i].clone()).collect();
                let s = self.step(&batch, phase)?;
                loss_sum += s.loss;
                aux_sum += s.aux;
                batches += 1;
                importance.iter_mut().zip(&s.importance).for_each(|(a, b)| *a += b);
                load.iter_mut().zip(&s.load).for_each(|(a, b)| *a += b);
            }
            let ev = evaluate(self.model, val, 256)?;
            let score = match phase {
                Phase::Mse => ev.mse,
                Phase::Nll => ev.nll,
            };
            if !score.is_finite() {
                return Err(Error::Numeric(format!("validation loss is {score} in phase {} epoch {epoch}", phase.index())));
            }
            log.epochs.push(EpochRecord {
                phase,
                epoch,
                train_loss: loss_sum / batches as f64,
                train_aux: aux_sum / batches as f64,
                val_mse: ev.mse,
                val_nll: ev.nll,
                importance,
                load,
            });
            if score < best.0 - self.cfg.min_delta {
                best = (score, self.model.params().clone(), epoch);
                stale = 0;
            } else {
                if score < best.0 {
                    best = (score, self.model.params().clone(), epoch);
                }
                stale += 1;
                if stale >= self.cfg.patience {
                    break;
                }
            }
        }
        self.model.params_mut().copy_values_from(&best.1);
        log.best_epoch[phase.index() - 1] = best.2;
        Ok(())
    }
}

/// Phase 1 (`MSE + λ·aux`) then phase 2 (`NLL + λ·aux`).
pub fn train(model: &mut MoeModel, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    let mut t = Trainer::new(model, cfg.clone())?;
    t.run_phase(train, val, Phase::Mse, &mut log)?;
    t.run_phase(train, val, Phase::Nll, &mut log)?;
    Ok(log)
}
