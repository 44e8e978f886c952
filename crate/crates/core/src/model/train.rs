use super::{EncpModel, LossTerms, MIN_BATCH};
use crate::data::Dataset;
use crate::error::{EncpError, Result};
use crate::nn::AdamState;
use crate::rng::stream;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Samples used to track the unregularized loss across epochs.
const MONITOR_SIZE: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 1e-2,
            lr: 1e-3,
            batch_size: 256,
            epochs: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(EncpError::InvalidParameter(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(EncpError::InvalidParameter(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size < MIN_BATCH {
            return Err(EncpError::InvalidParameter(format!(
                "batch_size must be at least {MIN_BATCH}, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total loss over the epoch's batches.
    pub loss: f64,
    /// Mean unregularized loss over the epoch's batches.
    pub l0: f64,
    /// Mean regularizer per block.
    pub omega: Vec<f64>,
    pub centering: f64,
    /// Unregularized loss on a fixed training subset after the epoch.
    pub monitor_l0: f64,
    pub valid_loss: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainHistory {
    /// Unregularized loss on the monitor subset before training.
    pub initial_l0: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept, when validation data was given.
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn final_l0(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.monitor_l0)
    }

    /// Copy with wall-clock fields zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        for e in &mut out.epochs {
            e.wall_time_s = 0.0;
        }
        out
    }
}

/// Adam on shuffled mini-batches. Centers are refreshed on the whole training
/// set before every epoch. With validation data the parameters of the epoch
/// with the lowest validation loss are restored at the end.
pub fn train(
    model: &mut EncpModel,
    data: &Dataset,
    valid: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    let n = data.len();
    if n < MIN_BATCH {
        return Err(EncpError::BatchTooSmall { min: MIN_BATCH, got: n });
    }
    let monitor = data.slice(0..n.min(MONITOR_SIZE));
    model.refresh_centers(&data.x, &data.y)?;
    let mut history = TrainHistory {
        initial_l0: model.loss_terms(&monitor.x, &monitor.y, config.gamma)?.l0,
        ..TrainHistory::default()
    };
    let mut adam = AdamState::new(model.num_params(), config.lr);
    let mut params = model.flatten();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(config.seed, "shuffle");
    let batch = config.batch_size.min(n);
    let num_batches = (n / batch).max(1);
    let mut best: Option<(f64, usize, EncpModel)> = None;

    for epoch in 0..config.epochs {
        let start = Instant::now();
        model.refresh_centers(&data.x, &data.y)?;
        order.shuffle(&mut rng);
        let mut sums: Option<LossTerms> = None;
        for b in 0..num_batches {
            let lo = b * batch;
            // the last batch absorbs the remainder
            let hi = if b + 1 == num_batches { n } else { lo + batch };
            let idx = &order[lo..hi];
            let xb = data.x.select_rows(idx);
            let yb = data.y.select_rows(idx);
            let (terms, grad) = model.empirical_loss(&xb, &yb, config.gamma)?;
            if !terms.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(EncpError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    first_index: idx[0],
                    size: idx.len(),
                });
            }
            adam.step(&mut params, &grad)?;
            model.assign_flat(&params)?;
            // keep the optimizer state on the projected parameters
            params = model.flatten();
            sums = Some(match sums {
                None => terms,
                Some(mut acc) => {
                    acc.total += terms.total;
                    acc.l0 += terms.l0;
                    acc.centering += terms.centering;
                    for (a, t) in acc.omega_blocks.iter_mut().zip(&terms.omega_blocks) {
                        *a += t;
                    }
                    acc
                }
            });
        }
        model.refresh_centers(&data.x, &data.y)?;
        let nb = num_batches as f64;
        let sums = sums.expect("at least one batch");
        let valid_loss = match valid {
            Some(v) if v.len() >= MIN_BATCH => Some(model.loss_terms(&v.x, &v.y, config.gamma)?.total),
            _ => None,
        };
        let monitor_l0 = model.loss_terms(&monitor.x, &monitor.y, config.gamma)?.l0;
        log::debug!(
            "epoch {epoch}: loss {:.5} l0 {:.5} monitor {:.5} valid {:?}",
            sums.total / nb,
            sums.l0 / nb,
            monitor_l0,
            valid_loss
        );
        if let Some(vl) = valid_loss {
            if vl.is_finite() && best.as_ref().is_none_or(|(b, _, _)| vl < *b) {
                best = Some((vl, epoch, model.clone()));
            }
        }
        history.epochs.push(EpochRecord {
            epoch,
            loss: sums.total / nb,
            l0: sums.l0 / nb,
            omega: sums.omega_blocks.iter().map(|o| o / nb).collect(),
            centering: sums.centering / nb,
            monitor_l0,
            valid_loss,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }
    if let Some((_, epoch, kept)) = best {
        *model = kept;
        history.best_epoch = Some(epoch);
    }
    Ok(history)
}
