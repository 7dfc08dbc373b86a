use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::inference_loss;
use super::{init_params, stay_loss_and_gradient, ModelConfig, ModelParams};
use crate::corpus::{Dataset, Split, SplitAssignment};
use crate::featurize::{EncodedStay, Preprocessing};
use crate::numcore::{AdamConfig, AdamState, Mode};
use crate::{seed, Error, Result};

// Gradients are summed per fixed-size chunk, then chunks in order, so the
// result does not depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without relative improvement of the training loss before
    /// stopping.
    pub patience: usize,
    pub min_rel_improvement: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 64,
            max_epochs: 40,
            patience: 3,
            min_rel_improvement: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-stay loss of the epoch's training batches (dropout active).
    pub train_loss: f64,
    /// Inference-mode mean loss on the validation stays.
    pub val_loss: Option<f64>,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest training loss.
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

fn check_inputs(cfg: &ModelConfig, stays: &[EncodedStay]) -> Result<()> {
    for s in stays {
        if let Some(&t) = s.token_ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Integrity(format!(
                "stay {}: token id {t} outside vocabulary",
                s.stay_id
            )));
        }
        if let Some((&c, _)) = s
            .structured
            .iter()
            .next_back()
            .filter(|(&c, _)| c >= cfg.n_structured)
        {
            return Err(Error::Integrity(format!(
                "stay {}: structured column {c} outside model input",
                s.stay_id
            )));
        }
    }
    Ok(())
}

/// Mean inference-mode loss over `stays`.
pub fn evaluate_loss(
    cfg: &ModelConfig,
    params: &ModelParams,
    stays: &[EncodedStay],
) -> Result<f64> {
    if stays.is_empty() {
        return Err(Error::Empty("no stays to evaluate".into()));
    }
    let losses = stays
        .par_iter()
        .map(|s| inference_loss(cfg, params, s))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / stays.len() as f64)
}

/// Loss sum and gradient sum over one batch (dropout masks derived from
/// `(seed, epoch, position)`).
fn batch_gradient(
    cfg: &ModelConfig,
    params: &ModelParams,
    batch: &[(usize, &EncodedStay)],
    train_seed: u64,
    epoch: usize,
) -> Result<(f64, ModelParams)> {
    let partials = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grads = ModelParams::zeros(cfg);
            let mut loss = 0.0;
            for &(pos, stay) in chunk {
                let mut rng = seed::rng(train_seed, &[epoch as u64, pos as u64]);
                loss +=
                    stay_loss_and_gradient(cfg, params, stay, Mode::Train, &mut rng, &mut grads)?;
            }
            Ok((loss, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = partials.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        grads.add_assign(&g);
    }
    Ok((loss, grads))
}

/// Minimizes the mean per-stay cross-entropy with Adam, shuffling each
/// epoch, and stops once the epoch training loss has not improved by
/// `min_rel_improvement` for `patience` epochs.
pub fn train_encoded(
    train: &[EncodedStay],
    validation: &[EncodedStay],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Empty("training split has no stays".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    check_inputs(model, train)?;
    check_inputs(model, validation)?;

    let mut params = init_params(model)?;
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = None;
    let mut stale = 0usize;
    let mut history = Vec::new();
    let mut adam = AdamState::new(cfg.adam);
    let names = ModelParams::names(model);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = seed::rng(cfg.seed, &[0x5u64]);

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(usize, &EncodedStay)> = idx
                .iter()
                .enumerate()
                .map(|(i, &s)| (b * cfg.batch_size + i, &train[s]))
                .collect();
            let (loss, mut grads) = batch_gradient(model, &params, &batch, cfg.seed, epoch)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            epoch_loss += loss;
            grads.scale(1.0 / batch.len() as f64);
            // PAD stays at zero: its gradient and moments stay zero.
            grads.zero_pad_row();
            let grad_tensors = grads.tensors();
            let mut triples: Vec<(&str, &mut _, &_)> = names
                .iter()
                .map(String::as_str)
                .zip(params.tensors_mut())
                .zip(grad_tensors)
                .map(|((n, p), g)| (n, p, g))
                .collect();
            adam.step(&mut triples)?;
        }
        let train_loss = epoch_loss / train.len() as f64;
        let val_loss = if validation.is_empty() {
            None
        } else {
            Some(evaluate_loss(model, &params, validation)?)
        };
        let improved =
            train_loss < best_loss * (1.0 - cfg.min_rel_improvement) || !best_loss.is_finite();
        if improved {
            best_loss = train_loss;
            best = params.clone();
            best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            improved,
        });
        if stale >= cfg.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        params: best,
        history,
        best_epoch,
    })
}

/// Encodes the train and validation splits with `preprocessing` and trains.
pub fn train(
    dataset: &Dataset,
    splits: &SplitAssignment,
    preprocessing: &Preprocessing,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let encode = |which: Split| -> Result<Vec<EncodedStay>> {
        splits
            .stays(dataset, &[which])?
            .into_iter()
            .map(|s| preprocessing.apply(s))
            .collect()
    };
    let train_stays = encode(Split::Train)?;
    let val_stays = encode(Split::Validation)?;
    train_encoded(&train_stays, &val_stays, model, cfg)
}
