use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::config::TrainConfig;
use crate::data::{FeatureStats, SceneSequence};
use crate::error::{Error, Result};
use crate::eval::predict_normalized;
use crate::nn::{apply_updates, Ctx, Mode};
use crate::param::ParamStore;
use crate::spatial::{stack_batch, Windformer};
use crate::tensor::Scalar;
use crate::training::loss::{mse_loss, ErrorAccumulator};
use crate::training::optim::AdamW;

/// Separates the shuffling stream from the initialization stream of the
/// same seed.
const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4521;

/// One row of the training history; errors are in physical units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub train_mae: f64,
    pub val_mse: f64,
    pub val_mae: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const COLUMNS: [&'static str; 6] =
        ["epoch", "train_mse", "train_mae", "val_mse", "val_mae", "wall_seconds"];

    /// Every recorded loss, excluding wall-clock time.
    pub fn losses(&self) -> Vec<[f64; 4]> {
        self.records
            .iter()
            .map(|r| [r.train_mse, r.train_mae, r.val_mse, r.val_mae])
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::COLUMNS)?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.train_mse.to_string(),
                r.train_mae.to_string(),
                r.val_mse.to_string(),
                r.val_mae.to_string(),
                format!("{:.3}", r.wall_seconds),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Stops once `patience` consecutive epochs fail to improve on the best
/// validation error.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records an epoch; returns whether it set a new best.
    pub fn observe(&mut self, epoch: usize, val: f64) -> bool {
        if val < self.best {
            self.best = val;
            self.best_epoch = epoch;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.best_epoch > 0 && self.since_best >= self.patience
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxEpochs,
    MaxSteps,
    Patience,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the epoch with the lowest validation MSE.
    pub best: ParamStore<f32>,
    /// Parameters after the last step.
    pub last: ParamStore<f32>,
    pub history: TrainHistory,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub steps: usize,
    pub stop: StopReason,
}

fn denormalized(stats: &FeatureStats, values: impl Iterator<Item = f64>) -> Vec<f64> {
    values.map(|v| stats.denormalize_target(v)).collect()
}

/// Physical-unit errors of normalized predictions against normalized targets.
pub(crate) fn physical_errors(
    stats: &FeatureStats,
    preds: &[Vec<f64>],
    seqs: &[SceneSequence],
) -> ErrorAccumulator {
    let mut acc = ErrorAccumulator::default();
    for (p, s) in preds.iter().zip(seqs) {
        acc.extend(
            &denormalized(stats, p.iter().copied()),
            &denormalized(stats, s.target.data().iter().copied()),
        );
    }
    acc
}

/// Mini-batch AdamW on normalized sequences with seeded shuffling, early
/// stopping on validation MSE and best-epoch retention.
pub fn train(
    model: &Windformer,
    mut params: ParamStore<f32>,
    train: &[SceneSequence],
    val: &[SceneSequence],
    stats: &FeatureStats,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Contract("validation set is empty".into()));
    }
    let turbines = vec![true; model.num_turbines];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let per_epoch = cfg.max_train_sequences.unwrap_or(train.len()).clamp(1, train.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = TrainHistory::default();
    let mut best = params.clone();
    let mut steps = 0usize;
    let mut stop = StopReason::MaxEpochs;
    let started = Instant::now();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut acc = ErrorAccumulator::default();
        for (b, chunk) in order[..per_epoch].chunks(cfg.batch_size).enumerate() {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let batch: Vec<&SceneSequence> = chunk.iter().map(|&i| &train[i]).collect();
            let (x, y) = stack_batch::<f32>(&batch)?;
            let (grads, updates, pred) = {
                let tape = Tape::new();
                let ctx = Ctx::new(&tape, &params, Mode::Train);
                let out = model.forward(&ctx, ctx.input(x))?;
                let loss = mse_loss(out, &y, &turbines)?;
                let lv = loss.value().item().as_f64();
                if !lv.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        batch: b + 1,
                        loss: lv,
                    });
                }
                let pred = out.value().to_f64_vec();
                (tape.backward(loss)?, ctx.into_updates(), pred)
            };
            params.zero_grad();
            params.accumulate_grads(&grads);
            opt.step(&mut params)?;
            apply_updates(&mut params, updates);
            steps += 1;
            acc.extend(
                &denormalized(stats, pred.into_iter()),
                &denormalized(stats, y.data().iter().map(|v| v.as_f64())),
            );
        }
        if acc.count == 0 {
            stop = StopReason::MaxSteps;
            break;
        }
        let preds = predict_normalized(model, &params, val, cfg.batch_size)?;
        let v = physical_errors(stats, &preds, val);
        history.records.push(EpochRecord {
            epoch,
            train_mse: acc.mse(),
            train_mae: acc.mae(),
            val_mse: v.mse(),
            val_mae: v.mae(),
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {epoch}: train mse {:.5} val mse {:.5}",
            acc.mse(),
            v.mse()
        );
        if stopper.observe(epoch, v.mse()) {
            best = params.clone();
        }
        if stopper.should_stop() {
            stop = StopReason::Patience;
            break;
        }
        if cfg.max_steps.is_some_and(|m| steps >= m) {
            stop = StopReason::MaxSteps;
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        last: params,
        history,
        best_epoch: stopper.best_epoch,
        best_val_mse: stopper.best,
        steps,
        stop,
    })
}
