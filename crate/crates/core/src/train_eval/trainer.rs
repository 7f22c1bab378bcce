use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ehr_data::EncodedPatient;
use crate::error::{Error, Result};
use crate::model::{CausalityMode, Model, PredictionRecord};
use crate::nn_core::{Gradients, ParamKind, Tape};
use crate::train_eval::adadelta::Adadelta;
use crate::train_eval::metrics::{accuracy, EvalReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub rho: f64,
    pub eps: f64,
    pub seed: u64,
    pub brnn_mode: CausalityMode,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 100,
            epochs: 100,
            rho: Adadelta::DEFAULT_RHO,
            eps: Adadelta::DEFAULT_EPS,
            seed: 0,
            brnn_mode: CausalityMode::Prefix,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.workers == 0 {
            return Err(Error::Config("batch_size, epochs and workers must be at least 1".into()));
        }
        let valid = self.rho > 0.0 && self.rho < 1.0 && self.eps > 0.0;
        if !valid {
            return Err(Error::Config(format!("invalid optimizer settings rho={} eps={}", self.rho, self.eps)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub const HEADER: &'static str = "epoch\ttrain_loss\tval_accuracy\tseconds";

    pub fn to_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.3}",
            self.epoch, self.train_loss, self.val_accuracy, self.seconds
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub model: Model,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// 1-based index of the first maximum.
pub fn best_epoch(val_accuracy: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &a) in val_accuracy.iter().enumerate() {
        if best.is_none_or(|(_, b)| a > b) {
            best = Some((i + 1, a));
        }
    }
    best.map(|(i, _)| i)
}

fn pool(workers: usize) -> Result<Option<rayon::ThreadPool>> {
    if workers <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map(Some)
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

/// Runs `f` over `items` on up to `workers` threads, results in input order.
fn ordered_map<T: Sync, U: Send>(
    pool: &Option<rayon::ThreadPool>,
    items: &[T],
    f: impl Fn(usize, &T) -> U + Sync + Send,
) -> Vec<U> {
    match pool {
        None => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
        Some(p) => p.install(|| items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()),
    }
}

pub fn predict_all(
    model: &Model,
    patients: &[EncodedPatient],
    mode: CausalityMode,
    workers: usize,
) -> Result<Vec<PredictionRecord>> {
    let pool = pool(workers)?;
    let per_patient = ordered_map(&pool, patients, |_, p| model.predict(p, mode));
    let mut out = Vec::new();
    for r in per_patient {
        out.extend(r?);
    }
    Ok(out)
}

pub fn evaluate(
    model: &Model,
    patients: &[EncodedPatient],
    mode: CausalityMode,
    group_divisor: usize,
    workers: usize,
) -> Result<EvalReport> {
    EvalReport::from_records(&predict_all(model, patients, mode, workers)?, group_divisor)
}

/// Mean per-patient loss without dropout, plus the weight penalty.
pub fn mean_loss(model: &Model, patients: &[EncodedPatient], mode: CausalityMode) -> Result<f64> {
    let mut total = 0.0;
    for p in patients {
        let mut tape = Tape::new(model.store());
        let g = model.graph(&mut tape, p, mode, None)?;
        total += tape.value(g.loss).item();
    }
    Ok(total / patients.len() as f64 + model.weight_penalty())
}

fn dropout_rng(seed: u64, epoch: usize, patient: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | patient as u64);
    rng
}

/// Loss and gradients for a contiguous run of patients, summed in order.
fn chunk_gradients(
    model: &Model,
    patients: &[(usize, &EncodedPatient)],
    mode: CausalityMode,
    seed: u64,
    epoch: usize,
) -> Result<(f64, Gradients)> {
    let mut grads = model.store().zero_grads();
    let mut loss = 0.0;
    for &(index, p) in patients {
        let mut tape = Tape::new(model.store());
        let mut rng = dropout_rng(seed, epoch, index);
        let g = model.graph(&mut tape, p, mode, Some(&mut rng))?;
        loss += tape.value(g.loss).item();
        tape.backward(g.loss, &mut grads)?;
    }
    Ok((loss, grads))
}

fn norms_summary(model: &Model) -> String {
    model
        .store()
        .norms()
        .into_iter()
        .map(|(n, v)| format!("{n}={v:.4e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn train(
    model: Model,
    train_set: &[EncodedPatient],
    validation: &[EncodedPatient],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(model, train_set, validation, config, |_| {})
}

/// Like [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    mut model: Model,
    train_set: &[EncodedPatient],
    validation: &[EncodedPatient],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || validation.is_empty() {
        return Err(Error::Contract("training and validation sets must be non-empty".into()));
    }
    let pool = pool(config.workers)?;
    let mut opt = Adadelta::new(model.store(), config.rho, config.eps);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(u64::MAX);
    let l2 = model.config().l2;
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Model)> = None;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let n_batches = order.len().div_ceil(config.batch_size);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let members: Vec<(usize, &EncodedPatient)> = batch.iter().map(|&i| (i, &train_set[i])).collect();
            let n_chunks = config.workers.min(members.len());
            let chunk_len = members.len().div_ceil(n_chunks);
            let chunks: Vec<&[(usize, &EncodedPatient)]> = members.chunks(chunk_len).collect();
            let results = ordered_map(&pool, &chunks, |_, c| {
                chunk_gradients(&model, c, config.brnn_mode, config.seed, epoch)
            });
            let mut grads = model.store().zero_grads();
            let mut data_loss = 0.0;
            for r in results {
                let (l, g) = r?;
                data_loss += l;
                grads.merge(&g);
            }
            let inv = 1.0 / members.len() as f64;
            grads.scale(inv);
            let batch_loss = data_loss * inv + model.weight_penalty();
            let grads_finite = grads.iter().all(|(_, g)| g.all_finite());
            if !batch_loss.is_finite() || !grads_finite {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b + 1,
                    norms: norms_summary(&model),
                });
            }
            if l2 > 0.0 {
                for &id in model.weight_ids() {
                    debug_assert_eq!(model.store().kind(id), ParamKind::Weight);
                    grads.get_mut(id).axpy(2.0 * l2, model.store().get(id));
                }
            }
            opt.step(model.store_mut(), &grads);
            loss_sum += batch_loss;
        }
        let records = predict_all(&model, validation, CausalityMode::Prefix, config.workers)?;
        let (_, val_accuracy) = accuracy(&records)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            val_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.push(record);
        if best.as_ref().is_none_or(|(_, a, _)| val_accuracy > *a) {
            best = Some((epoch, val_accuracy, model.clone()));
        }
    }
    let (best_epoch, _, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn best_epoch_is_first_maximum() {
        assert_eq!(best_epoch(&[0.3, 0.5, 0.4]), Some(2));
        assert_eq!(best_epoch(&[0.5, 0.5]), Some(1));
        assert_eq!(best_epoch(&[]), None);
    }

    #[test]
    fn history_line_format() {
        let r = EpochRecord {
            epoch: 3,
            train_loss: 1.5,
            val_accuracy: 0.25,
            seconds: 0.5,
        };
        assert_eq!(r.to_line(), "3\t1.500000\t0.250000\t0.500");
    }
}
