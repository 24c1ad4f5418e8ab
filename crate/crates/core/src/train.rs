//! SGD training on seen-class samples with a step learning-rate schedule.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassSplit, Dataset, OneShotSample, SampleSplit};
use crate::detector::{LossTerms, OneShotDetector};
use crate::error::{CatError, Result};
use crate::numerics::checkpoint::{read_checkpoint, write_checkpoint};
use crate::numerics::{sgd_step, Graph, SgdState, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epoch indices (0-based) from which the rate is multiplied by `lr_gamma`.
    pub lr_steps: Vec<usize>,
    pub lr_gamma: f64,
    pub batch_size: usize,
    /// Linear ramp of the rate over the first optimizer steps.
    pub warmup_steps: usize,
    /// Clip the global gradient norm of each step; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_steps: vec![5, 9],
            lr_gamma: 0.1,
            batch_size: 4,
            warmup_steps: 100,
            grad_clip: Some(10.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CatError::config("epochs and batch size must be positive"));
        }
        if !(self.lr_gamma > 0.0) {
            return Err(CatError::config("lr_gamma must be positive"));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(CatError::config("grad_clip must be positive"));
        }
        Ok(())
    }

    /// Learning rate of `epoch` before warmup.
    pub fn epoch_rate(&self, epoch: usize) -> f64 {
        let decays = self.lr_steps.iter().filter(|&&s| epoch >= s).count();
        self.learning_rate * self.lr_gamma.powi(decays as i32)
    }
}

/// Optimizer position, saved alongside the weights so training can resume.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub sgd: SgdState,
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: usize,
}

impl TrainState {
    pub fn new(det: &OneShotDetector, cfg: &TrainConfig) -> Result<Self> {
        Ok(TrainState {
            sgd: SgdState::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay, &det.store)?,
            epoch: 0,
            step: 0,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub objectness: f64,
    pub matching: f64,
    pub regression: f64,
}

/// Training samples: the train split, refusing any unseen class.
pub fn training_samples(ds: &Dataset) -> Result<Vec<&OneShotSample>> {
    let unseen = ds.class_ids(ClassSplit::Unseen);
    let samples: Vec<&OneShotSample> = ds.split(SampleSplit::Train).collect();
    for s in &samples {
        if unseen.contains(&s.query_class) || s.instances.iter().any(|i| unseen.contains(&i.class)) {
            return Err(CatError::contract(format!(
                "unseen class leaked into training sample {}",
                s.id
            )));
        }
    }
    if samples.is_empty() {
        return Err(CatError::data("the dataset has no training samples"));
    }
    Ok(samples)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    idx.shuffle(&mut rng);
    idx
}

/// Run one epoch in place and return its mean losses.
pub fn train_epoch(
    det: &mut OneShotDetector,
    samples: &[&OneShotSample],
    cfg: &TrainConfig,
    seed: u64,
    state: &mut TrainState,
) -> Result<EpochStats> {
    cfg.validate()?;
    let epoch = state.epoch;
    let base = cfg.epoch_rate(epoch);
    let order = epoch_order(samples.len(), seed, epoch);
    let mut sum = LossTerms::default();
    for batch in order.chunks(cfg.batch_size) {
        det.store.zero_grad();
        for &i in batch {
            let s = samples[i];
            let (terms, grads) = {
                let mut g = Graph::with_params(&det.store);
                let (loss, terms) = det.loss(&mut g, &s.target.to_tensor(), &s.query.to_tensor(), &s.boxes)?;
                g.backward(loss)?;
                (terms, g.param_grads())
            };
            if !terms.total().is_finite() {
                return Err(CatError::contract(format!("non-finite loss on sample {}", s.id)));
            }
            det.store.accumulate_grads(&grads);
            sum.objectness += terms.objectness;
            sum.matching += terms.matching;
            sum.regression += terms.regression;
        }
        det.store.scale_grads(1.0 / batch.len() as f64);
        if let Some(max) = cfg.grad_clip {
            let norm = det.store.grad_norm();
            if norm > max {
                det.store.scale_grads(max / norm);
            }
        }
        let warm = if state.step < cfg.warmup_steps {
            (state.step + 1) as f64 / cfg.warmup_steps as f64
        } else {
            1.0
        };
        state.sgd.learning_rate = base * warm;
        sgd_step(&mut det.store, &mut state.sgd)?;
        state.step += 1;
    }
    det.store.zero_grad();
    state.epoch += 1;
    let n = samples.len() as f64;
    Ok(EpochStats {
        epoch,
        learning_rate: base,
        loss: sum.total() / n,
        objectness: sum.objectness / n,
        matching: sum.matching / n,
        regression: sum.regression / n,
    })
}

/// Train until `cfg.epochs` epochs are complete, starting from `state`.
pub fn train(
    det: &mut OneShotDetector,
    samples: &[&OneShotSample],
    cfg: &TrainConfig,
    seed: u64,
    state: &mut TrainState,
    mut on_epoch: impl FnMut(&EpochStats, &OneShotDetector, &TrainState) -> Result<()>,
) -> Result<Vec<EpochStats>> {
    let mut log = Vec::new();
    while state.epoch < cfg.epochs {
        let stats = train_epoch(det, samples, cfg, seed, state)?;
        log::info!(
            "epoch {} lr {:.4} loss {:.4} (obj {:.4} match {:.4} reg {:.4})",
            stats.epoch,
            stats.learning_rate,
            stats.loss,
            stats.objectness,
            stats.matching,
            stats.regression
        );
        on_epoch(&stats, det, state)?;
        log.push(stats);
    }
    Ok(log)
}

const VELOCITY_PREFIX: &str = "optimizer.velocity.";
const EPOCH_KEY: &str = "optimizer.epoch";
const STEP_KEY: &str = "optimizer.step";

/// Weights, optimizer buffers and progress counters in one checkpoint file.
pub fn save_checkpoint(path: &Path, det: &OneShotDetector, state: Option<&TrainState>) -> Result<()> {
    let mut tensors = det.store.named_tensors();
    if let Some(st) = state {
        for (i, (name, t)) in det.store.named_tensors().into_iter().enumerate() {
            tensors.push((
                format!("{VELOCITY_PREFIX}{name}"),
                Tensor::new(t.shape().to_vec(), st.sgd.velocity[i].clone())?,
            ));
        }
        tensors.push((EPOCH_KEY.to_string(), Tensor::scalar(st.epoch as f64)));
        tensors.push((STEP_KEY.to_string(), Tensor::scalar(st.step as f64)));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, &tensors)?;
    w.flush()?;
    Ok(())
}

/// Restore weights into `det`; returns the optimizer state when present.
pub fn load_checkpoint(path: &Path, det: &mut OneShotDetector, cfg: &TrainConfig) -> Result<Option<TrainState>> {
    let tensors = read_checkpoint(BufReader::new(File::open(path)?))?;
    det.store.load_values(&tensors)?;
    let Some((_, epoch)) = tensors.iter().find(|(n, _)| n == EPOCH_KEY) else {
        return Ok(None);
    };
    let step = tensors
        .iter()
        .find(|(n, _)| n == STEP_KEY)
        .map(|(_, t)| t.item() as usize)
        .ok_or_else(|| CatError::data("checkpoint has an epoch counter but no step counter"))?;
    let mut state = TrainState::new(det, cfg)?;
    for (i, (_, name, t)) in det.store.iter().enumerate() {
        let key = format!("{VELOCITY_PREFIX}{name}");
        let v = tensors
            .iter()
            .find(|(n, _)| *n == key)
            .ok_or_else(|| CatError::data(format!("checkpoint is missing {key}")))?;
        if v.1.numel() != t.numel() {
            return Err(CatError::dim("load_checkpoint", v.1.shape(), t.shape()));
        }
        state.sgd.velocity[i] = v.1.data().to_vec();
    }
    state.epoch = epoch.item() as usize;
    state.step = step;
    Ok(Some(state))
}

pub fn write_loss_log<W: Write>(mut w: W, log: &[EpochStats]) -> Result<()> {
    writeln!(w, "epoch,lr,loss,objectness,matching,regression")?;
    for s in log {
        writeln!(
            w,
            "{},{},{:.10},{:.10},{:.10},{:.10}",
            s.epoch, s.learning_rate, s.loss, s.objectness, s.matching, s.regression
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_decays_at_steps() {
        let c = TrainConfig::default();
        let rates: Vec<f64> = (0..10).map(|e| c.epoch_rate(e)).collect();
        assert_eq!(rates[4], 0.01);
        assert!((rates[5] - 0.001).abs() < 1e-15);
        assert!((rates[8] - 0.001).abs() < 1e-15);
        assert!((rates[9] - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn epoch_orders_are_permutations_and_differ() {
        let a = epoch_order(20, 3, 0);
        let b = epoch_order(20, 3, 1);
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
        assert_ne!(a, b);
        assert_eq!(a, epoch_order(20, 3, 0));
    }
}
