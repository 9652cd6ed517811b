//! Fine-tuning loop with layer freezing, early stopping on validation loss
//! and per-epoch curves.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DomainDataset, Splits};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_split, label_rank, CurvePoint, SplitMetrics};
use crate::model::{Component, ParamKey, TransformerModel};
use crate::tensor::{Adam, AdamConfig, LrSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    DgFinetune,
    PostpruneFinetune,
}

/// Which parameters receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Train the last `k` blocks, the final norm and the head.
    LastBlocks { k: usize },
    /// Train everything.
    None,
}

impl FreezePolicy {
    pub fn trains(&self, key: &ParamKey, num_layers: usize) -> bool {
        match *self {
            FreezePolicy::None => true,
            FreezePolicy::LastBlocks { k } => match key.layer {
                Some(l) => l + k >= num_layers,
                None => matches!(key.component, Component::FinalLn | Component::Head),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Linear warmup from `start_factor`·lr over `warmup_epochs`, then cosine
    /// annealing to zero at the last epoch.
    WarmupCosine { warmup_epochs: usize, start_factor: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub optimizer: AdamConfig,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub freeze: FreezePolicy,
    /// Random horizontal flips on training batches.
    pub flip: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// Adam, lr 5e-5, weight decay 0.05, batch 8, patience 5, last two
    /// blocks trainable.
    pub fn dg_finetune() -> Self {
        Self {
            phase: Phase::DgFinetune,
            optimizer: AdamConfig::adam(5e-5, 0.05),
            schedule: Schedule::Constant,
            batch_size: 8,
            max_epochs: 50,
            patience: 5,
            freeze: FreezePolicy::LastBlocks { k: 2 },
            flip: true,
            seed: 0,
        }
    }

    /// AdamW, lr 1.5e-4, β₁ 0.9, weight decay 0.3, linear warmup from
    /// 0.033·lr then cosine annealing, 300 epochs.
    pub fn postprune_finetune() -> Self {
        Self {
            phase: Phase::PostpruneFinetune,
            optimizer: AdamConfig::adamw(1.5e-4, 0.3),
            schedule: Schedule::WarmupCosine {
                warmup_epochs: 5,
                start_factor: 0.033,
            },
            max_epochs: 300,
            ..Self::dg_finetune()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTrainConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", o.lr));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) || !(o.eps > 0.0) {
            return bad("weight_decay must be non-negative and eps positive".into());
        }
        if let Schedule::WarmupCosine { start_factor, .. } = self.schedule {
            if !(start_factor > 0.0 && start_factor <= 1.0) {
                return bad(format!("warmup start_factor {start_factor} outside (0, 1]"));
            }
        }
        Ok(())
    }

    fn lr_schedule(&self, steps_per_epoch: usize) -> LrSchedule {
        match self.schedule {
            Schedule::Constant => LrSchedule::Constant,
            Schedule::WarmupCosine {
                warmup_epochs,
                start_factor,
            } => LrSchedule::WarmupCosine {
                warmup_steps: (warmup_epochs * steps_per_epoch) as u64,
                total_steps: (self.max_epochs * steps_per_epoch) as u64,
                warmup_start_factor: start_factor,
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights of the epoch with the lowest validation loss (the input model
    /// when no epoch ran).
    pub best: TransformerModel,
    pub last: TransformerModel,
    pub best_epoch: Option<usize>,
    pub best_valid_loss: Option<f64>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub curves: Vec<CurvePoint>,
    pub wall_clock: Duration,
}

fn point(epoch: usize, split: &str, m: &SplitMetrics) -> CurvePoint {
    CurvePoint {
        epoch,
        split: split.into(),
        loss: m.loss,
        top1: m.top1,
        top5: m.top5,
    }
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged { epoch, loss: f64::NAN },
        other => other,
    }
}

/// Trains on `splits.train`, evaluating valid and test after every epoch.
/// Training curves use running metrics over the epoch's (augmented) batches.
pub fn train(model: &TransformerModel, data: &DomainDataset, splits: &Splits, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if splits.train.is_empty() || splits.valid.is_empty() {
        return Err(Error::InvalidTrainConfig("train and valid splits must be non-empty".into()));
    }
    if data.num_classes() != model.config().num_classes {
        return Err(Error::InvalidTrainConfig(format!(
            "dataset has {} classes but the model head has {}",
            data.num_classes(),
            model.config().num_classes
        )));
    }
    let start = Instant::now();
    let layers = model.config().num_layers();
    let freeze = config.freeze;
    let trainable = move |k: &ParamKey| freeze.trains(k, layers);
    let steps_per_epoch = splits.train.len().div_ceil(config.batch_size);
    let mut opt = Adam::new(config.optimizer.clone(), config.lr_schedule(steps_per_epoch));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order = splits.train.clone();
    let mut current = model.clone();
    let mut best = model.clone();
    let (mut best_epoch, mut best_loss) = (None, None::<f64>);
    let (mut stale, mut epochs_run, mut stopped_early) = (0, 0, false);
    let mut curves = Vec::new();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut top1, mut top5) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let (x, y) = data.batch(chunk, config.flip.then_some(&mut rng));
            let (loss, logits, grads) = current.forward_backward(&x, &y, trainable).map_err(|e| diverged(epoch, e))?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            let k = logits.shape()[1];
            for (i, &label) in y.iter().enumerate() {
                let rank = label_rank(&logits.data()[i * k..(i + 1) * k], label);
                top1 += usize::from(rank == 0);
                top5 += usize::from(rank < 5);
            }
            loss_sum += loss * chunk.len() as f64;
            for (key, g) in grads {
                current.param_mut(&key)?.set_grad(g)?;
            }
            opt.step(current.params_mut().iter_mut().filter(|(k, _)| trainable(k)))?;
            current.params_mut().values_mut().for_each(|t| t.clear_grad());
            if current.params().values().any(|t| !t.is_finite()) {
                return Err(Error::Diverged { epoch, loss });
            }
        }
        let n = order.len() as f64;
        curves.push(CurvePoint {
            epoch,
            split: "train".into(),
            loss: loss_sum / n,
            top1: top1 as f64 / n,
            top5: top5 as f64 / n,
        });
        let valid = evaluate_split(&current, data, &splits.valid).map_err(|e| diverged(epoch, e))?;
        curves.push(point(epoch, "valid", &valid));
        if !splits.test.is_empty() {
            curves.push(point(epoch, "test", &evaluate_split(&current, data, &splits.test)?));
        }
        epochs_run = epoch;
        if !valid.loss.is_finite() {
            return Err(Error::Diverged { epoch, loss: valid.loss });
        }
        if best_loss.is_none_or(|b| valid.loss < b) {
            best_loss = Some(valid.loss);
            best_epoch = Some(epoch);
            best = current.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best,
        last: current,
        best_epoch,
        best_valid_loss: best_loss,
        epochs_run,
        stopped_early,
        curves,
        wall_clock: start.elapsed(),
    })
}
