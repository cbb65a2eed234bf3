//! Mini-batch training loop.
//!
//! Batch order in epoch `e` comes from the shuffle stream indexed by `e` and
//! dropout masks at global step `s` from the dropout stream indexed by `s`.
//! Both are derived from the checkpointed step counter, so training resumed
//! from a checkpoint takes exactly the steps an uninterrupted run would.

use rand::seq::SliceRandom;

use crate::data::{FeatureContainer, VqaExample};
use crate::error::{Error, Result};
use crate::model::{CvaModel, Sample};
use crate::rng::{self, Stream};
use crate::train::dropout::dropout_mask;
use crate::train::optim::{adam_step, clip_gradients};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    /// Fraction of training examples whose (dropout-on) prediction matched.
    pub accuracy: f64,
}

pub fn steps_per_epoch(examples: usize, batch_size: usize) -> u64 {
    examples.div_ceil(batch_size) as u64
}

/// Example indices of epoch `epoch` in visiting order.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Stream::Shuffle, epoch));
    order
}

pub fn samples<'d>(
    examples: &'d [VqaExample],
    features: &'d FeatureContainer,
) -> Result<Vec<Sample<'d>>> {
    examples
        .iter()
        .map(|e| {
            let features = features.get(&e.image_id).ok_or_else(|| {
                Error::Validation(format!("image `{}` has no features", e.image_id))
            })?;
            Ok(Sample {
                features,
                tokens: &e.tokens,
                label: e.label,
            })
        })
        .collect()
}

/// Trains from the model's current step until `until_step` or the end of the
/// current epoch, whichever comes first.
pub fn train_steps(
    model: &mut CvaModel,
    data: &[Sample<'_>],
    cfg: &TrainConfig,
    until_step: u64,
) -> Result<EpochStats> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let per_epoch = steps_per_epoch(data.len(), cfg.batch_size);
    let epoch = model.store.step / per_epoch;
    let order = epoch_order(data.len(), cfg.seed, epoch);
    let adam = cfg.adam();
    let fused = model.config.dims.fused;

    let (mut loss_sum, mut correct, mut seen, mut steps) = (0.0, 0usize, 0usize, 0usize);
    let end = ((epoch + 1) * per_epoch).min(until_step.max(model.store.step));
    while model.store.step < end {
        let batch_index = (model.store.step % per_epoch) as usize;
        let start = batch_index * cfg.batch_size;
        let batch: Vec<Sample<'_>> = order[start..(start + cfg.batch_size).min(data.len())]
            .iter()
            .map(|&i| data[i])
            .collect();
        let masks = if cfg.dropout > 0.0 {
            let mut r = rng::stream(cfg.seed, Stream::Dropout, model.store.step);
            Some(
                (0..batch.len())
                    .map(|_| dropout_mask(fused, cfg.dropout, &mut r))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let out = model
            .loss_and_grads(&batch, masks.as_deref(), None)
            .map_err(|e| match e {
                Error::NonFinite(m) => {
                    Error::NonFinite(format!("epoch {epoch} batch {batch_index}: {m}"))
                }
                other => other,
            })?;
        loss_sum += out.loss * batch.len() as f64;
        correct += out
            .predictions
            .iter()
            .zip(&batch)
            .filter(|(p, s)| **p == s.label)
            .count();
        seen += batch.len();
        steps += 1;
        model.store.zero_grads();
        model.store.accumulate(&out.grads, 1.0);
        clip_gradients(&mut model.store, cfg.clip_norm)?;
        adam_step(&mut model.store, &adam)?;
    }
    let denom = seen.max(1) as f64;
    Ok(EpochStats {
        epoch: epoch as usize,
        steps,
        mean_loss: loss_sum / denom,
        accuracy: correct as f64 / denom,
    })
}

/// Runs (the rest of) the current epoch.
pub fn train_epoch(
    model: &mut CvaModel,
    data: &[Sample<'_>],
    cfg: &TrainConfig,
) -> Result<EpochStats> {
    train_steps(model, data, cfg, u64::MAX)
}

/// Trains until `cfg.epochs` epochs are complete, calling `on_epoch` after
/// each one.
pub fn train(
    model: &mut CvaModel,
    data: &[Sample<'_>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let total = steps_per_epoch(data.len(), cfg.batch_size) * cfg.epochs as u64;
    let mut stats = Vec::new();
    while model.store.step < total {
        let s = train_steps(model, data, cfg, total)?;
        on_epoch(&s);
        stats.push(s);
    }
    Ok(stats)
}
