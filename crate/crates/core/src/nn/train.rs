use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{grad_norm, Adam, AdamConfig, ParamSet};
use crate::rng::{self, stream};
use crate::tensor::{NodeId, Result, Tape, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitCfg {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl Default for FitCfg {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            batch_size: 128,
            patience: 20,
            adam: AdamConfig::default(),
        }
    }
}

/// Which pass a loss is being evaluated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    /// Training step in the given epoch (fresh noise and permutations).
    Train { epoch: usize },
    /// Validation: fixed randomness so losses compare across epochs.
    Validate,
}

/// A model plus data that can produce a scalar loss for a set of rows.
pub trait Objective {
    fn params(&self) -> Vec<&ParamSet>;
    fn params_mut(&mut self) -> Vec<&mut ParamSet>;
    /// Mean loss over `rows`, recorded on `tape` with parameters bound as `ids`.
    fn loss(&mut self, tape: &mut Tape<f32>, ids: &[Vec<NodeId>], rows: &[usize], pass: Pass) -> Result<NodeId>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub grad_norm: f64,
    pub wall_s: f64,
    pub skipped_steps: usize,
}

impl EpochRecord {
    /// One structured-text log line.
    pub fn line(&self) -> String {
        format!(
            "epoch={} train_loss={:.6} val_loss={:.6} grad_norm={:.6} wall_s={:.3} skipped={}",
            self.epoch, self.train_loss, self.val_loss, self.grad_norm, self.wall_s, self.skipped_steps
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Validation loss of the untrained model.
    pub initial_val: f64,
    pub best_val: f64,
    /// 0 when the initial parameters were never beaten.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub history: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

fn bind_all<O: Objective>(obj: &O, tape: &mut Tape<f32>, frozen: bool) -> Vec<Vec<NodeId>> {
    obj.params()
        .into_iter()
        .map(|p| if frozen { p.bind_frozen(tape) } else { p.bind(tape) })
        .collect()
}

/// Row-weighted mean loss over `rows` without gradients.
pub fn evaluate<O: Objective>(obj: &mut O, rows: &[usize], batch_size: usize, pass: Pass) -> Result<f64> {
    let mut total = 0.0;
    for chunk in rows.chunks(batch_size) {
        let mut tape = Tape::new();
        let ids = bind_all(obj, &mut tape, true);
        let l = obj.loss(&mut tape, &ids, chunk, pass)?;
        total += tape.value(l).item() as f64 * chunk.len() as f64;
    }
    Ok(total / rows.len() as f64)
}

/// Minibatch Adam with early stopping on the validation loss. On return the
/// objective holds the parameters with the best validation loss.
pub fn fit<O: Objective>(
    obj: &mut O,
    train: &[usize],
    val: &[usize],
    cfg: &FitCfg,
    seed: u64,
    log: &mut dyn FnMut(&EpochRecord),
) -> Result<FitReport> {
    if train.is_empty() || val.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "fit",
            reason: format!("{} training and {} validation rows", train.len(), val.len()),
        });
    }
    let batch = cfg.batch_size.max(2);
    let mut adams: Vec<Adam> = obj.params().into_iter().map(|p| Adam::new(cfg.adam, p)).collect();
    let snapshot = |o: &O| o.params().into_iter().cloned().collect::<Vec<ParamSet>>();

    let initial_val = evaluate(obj, val, batch, Pass::Validate)?;
    let mut best_val = initial_val;
    let mut best = snapshot(obj);
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut warnings = Vec::new();
    let mut order = train.to_vec();

    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        order.copy_from_slice(train);
        order.shuffle(&mut rng::rng(seed, &[stream::SHUFFLE, epoch as u64]));
        let (mut loss_sum, mut rows_seen, mut gnorm, mut skipped) = (0.0, 0usize, 0.0, 0);
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            let mut tape = Tape::new();
            let ids = bind_all(obj, &mut tape, false);
            let step = obj
                .loss(&mut tape, &ids, chunk, Pass::Train { epoch })
                .and_then(|l| Ok((tape.value(l).item() as f64, tape.backward(l)?)));
            let (value, grads) = match step {
                Ok(v) => v,
                Err(TensorError::NonFinite { .. } | TensorError::NonFiniteLayer { .. }) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let all: Vec<_> = ids.iter().map(|g| grads.collect(g)).collect();
            gnorm = all.iter().map(|g| grad_norm(g).powi(2)).sum::<f64>().sqrt();
            for ((p, g), adam) in obj.params_mut().into_iter().zip(&all).zip(&mut adams) {
                adam.step(p, g);
            }
            loss_sum += value * chunk.len() as f64;
            rows_seen += chunk.len();
        }
        let val_loss = match evaluate(obj, val, batch, Pass::Validate) {
            Ok(v) => v,
            Err(TensorError::NonFinite { .. } | TensorError::NonFiniteLayer { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        let rec = EpochRecord {
            epoch,
            train_loss: if rows_seen > 0 { loss_sum / rows_seen as f64 } else { f64::NAN },
            val_loss,
            grad_norm: gnorm,
            wall_s: t0.elapsed().as_secs_f64(),
            skipped_steps: skipped,
        };
        if skipped > 0 {
            warnings.push(format!("epoch {epoch}: skipped {skipped} non-finite steps"));
        }
        log(&rec);
        history.push(rec);
        if val_loss < best_val {
            best_val = val_loss;
            best = snapshot(obj);
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    if best_epoch == 0 && cfg.max_epochs > 0 {
        warnings.push("validation loss never improved; returning the initial parameters".into());
    }
    for (p, b) in obj.params_mut().into_iter().zip(best) {
        *p = b;
    }
    Ok(FitReport {
        initial_val,
        best_val,
        best_epoch,
        epochs_run: history.len(),
        history,
        warnings,
    })
}
