//! Mini-batch training with Adam, validation-AUC early stopping and
//! learning-rate halving, plus the architecture grid search.

mod adam;
pub mod grid;

pub use adam::{adam_update, Adam, AdamConfig};

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{auc, ScoredSession};
use crate::model::{Gradients, Model};
use crate::nn::Float;
use crate::transform::{batches_in_order, batchify, Batch, BatchOptions, EncodedSession};

/// Rows per independently differentiated slice of a batch. Slices run in
/// parallel and are summed in order, so results do not depend on the
/// number of threads.
pub const CHUNK_ROWS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub anneal_factor: f64,
    pub seed: u64,
    pub freeze_embeddings: bool,
    /// Rescale the whole gradient when its norm exceeds this.
    pub clip_norm: Option<f64>,
    pub length_bucket_window: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 20,
            early_stop_patience: 2,
            anneal_factor: 0.5,
            seed: 0,
            freeze_embeddings: false,
            clip_norm: None,
            length_bucket_window: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("anneal_factor", self.anneal_factor)?;
        if let Some(c) = self.clip_norm {
            positive("clip_norm", c)?;
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("batch_size, max_epochs and early_stop_patience must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub valid_auc: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub seconds: f64,
    pub improved: bool,
}

/// Scores the model after each epoch; higher is better.
pub trait Validator<T> {
    fn validate(&mut self, model: &Model<T>, epoch: usize) -> Result<f64>;
}

/// Validation AUC over a fixed session set.
pub struct AucValidator<'a> {
    sessions: &'a [EncodedSession],
    batch_size: usize,
}

impl<'a> AucValidator<'a> {
    /// Fails unless both classes are present.
    pub fn new(sessions: &'a [EncodedSession], batch_size: usize) -> Result<Self> {
        let buyers = sessions.iter().filter(|s| s.label.is_buyer()).count();
        if buyers == 0 || buyers == sessions.len() {
            return Err(Error::AucUndefined(format!(
                "validation set has {buyers} buyers among {} sessions",
                sessions.len()
            )));
        }
        Ok(AucValidator { sessions, batch_size })
    }
}

impl<T: Float> Validator<T> for AucValidator<'_> {
    fn validate(&mut self, model: &Model<T>, _epoch: usize) -> Result<f64> {
        let scored = score_sessions(model, self.sessions, self.batch_size)?;
        let (scores, labels): (Vec<f64>, Vec<bool>) = scored.iter().map(|s| (s.score, s.label.is_buyer())).unzip();
        auc(&scores, &labels)
    }
}

/// Scores every session, in input order.
pub fn score_sessions<T: Float>(model: &Model<T>, sessions: &[EncodedSession], batch_size: usize) -> Result<Vec<ScoredSession>> {
    let batches = batches_in_order(sessions, batch_size)?;
    let probs: Vec<Vec<f64>> = batches
        .par_iter()
        .map(|b| Ok(model.forward(b)?.iter().map(|p| p.f64()).collect()))
        .collect::<Result<_>>()?;
    Ok(sessions
        .iter()
        .zip(probs.into_iter().flatten())
        .map(|(s, score)| ScoredSession {
            session_id: s.session_id,
            score,
            label: s.label,
            original_len: s.original_len,
            unrolled_len: s.unrolled_len,
            max_price: s.max_price,
        })
        .collect())
}

/// Mean loss and its gradient over a batch.
pub fn batch_gradients<T: Float>(model: &Model<T>, batch: &Batch) -> Result<(f64, Gradients<T>)> {
    let n = batch.len();
    let run = |b: &Batch| -> Result<(f64, Gradients<T>)> {
        let mut tape = model.forward_tape(b)?;
        let loss = tape.loss().f64();
        Ok((loss, tape.backward(model, b)?))
    };
    if n <= CHUNK_ROWS {
        return run(batch);
    }
    let ranges: Vec<std::ops::Range<usize>> = (0..n).step_by(CHUNK_ROWS).map(|s| s..(s + CHUNK_ROWS).min(n)).collect();
    let parts: Vec<(usize, f64, Gradients<T>)> = ranges
        .into_par_iter()
        .map(|r| {
            let rows = r.len();
            let (loss, g) = run(&batch.rows(r))?;
            Ok((rows, loss, g))
        })
        .collect::<Result<_>>()?;
    let mut total = Gradients::zeros_for(model);
    let mut loss = 0.0;
    for (rows, l, mut g) in parts {
        let w = rows as f64 / n as f64;
        g.scale(T::of(w));
        total.accumulate(&g);
        loss += l * w;
    }
    Ok((loss, total))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Parameters from the best validation epoch.
    pub model: Model<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_auc: f64,
    pub stopped_early: bool,
    pub final_lr: f64,
}

/// Trains until `max_epochs` or `early_stop_patience` consecutive epochs
/// whose validation score is strictly below the best so far. Each such
/// epoch multiplies the learning rate by `anneal_factor`; a tie neither
/// counts as worsening nor resets the count. `observer` sees every epoch
/// after validation.
pub fn train<T: Float>(
    mut model: Model<T>,
    cfg: &TrainConfig,
    train_set: &[EncodedSession],
    validator: &mut dyn Validator<T>,
    observer: &mut dyn FnMut(&EpochRecord, &Model<T>) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if cfg.freeze_embeddings {
        model.set_embeddings_trainable(false);
    }
    let mut adam = Adam::new(&model, AdamConfig::default());
    let mut lr = cfg.learning_rate;
    let mut best: Option<(f64, usize, Model<T>)> = None;
    let mut worsening = 0;
    let mut history = Vec::new();
    let opts = BatchOptions {
        length_bucket_window: cfg.length_bucket_window,
    };
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let batches = batchify(train_set, cfg.batch_size, cfg.seed, epoch as u64, opts)?;
        let mut loss_sum = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let (loss, mut grads) = batch_gradients(&model, batch)?;
            let bad = grads
                .first_non_finite(&model)
                .or_else(|| (!loss.is_finite()).then(|| "loss".to_string()));
            if let Some(param) = bad {
                return Err(Error::NonFiniteGradient { param, epoch, batch: bi });
            }
            if let Some(c) = cfg.clip_norm {
                let norm = grads.global_norm();
                if norm > c {
                    grads.scale(T::of(c / norm));
                }
            }
            adam.step(&mut model, &grads, lr);
            loss_sum += loss * batch.len() as f64;
        }
        let valid_auc = validator.validate(&model, epoch)?;
        let improved = best.as_ref().is_none_or(|(b, _, _)| valid_auc > *b);
        let record = EpochRecord {
            epoch,
            loss: loss_sum / train_set.len() as f64,
            valid_auc,
            lr,
            seconds: start.elapsed().as_secs_f64(),
            improved,
        };
        if improved {
            best = Some((valid_auc, epoch, model.clone()));
            worsening = 0;
        } else if best.as_ref().is_some_and(|(b, _, _)| valid_auc < *b) {
            worsening += 1;
            lr *= cfg.anneal_factor;
        }
        observer(&record, &model)?;
        history.push(record);
        if worsening >= cfg.early_stop_patience {
            break;
        }
    }
    let (best_auc, best_epoch, model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        stopped_early: worsening >= cfg.early_stop_patience,
        best_epoch,
        best_auc,
        history,
        final_lr: lr,
    })
}
