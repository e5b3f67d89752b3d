use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::forward::{loss_and_grad, TrainingBatch};
use super::params::ClientModelParams;
use super::ModelShape;
use crate::data::{sample_train_negatives, InteractionDataset};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub reg_lambda: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub negatives_per_positive: usize,
    /// Item-table rate is `learning_rate * item_lr_scale`.
    pub item_lr_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            reg_lambda: 0.1,
            local_epochs: 1,
            batch_size: 256,
            negatives_per_positive: 4,
            item_lr_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainReport {
    /// Mean pre-update loss over all mini-batches.
    pub mean_loss: f64,
    pub steps: usize,
}

/// The most recent `len` items, left-padded with 0.
pub fn pad_sequence(items: &[u32], len: usize) -> Vec<u32> {
    let tail = &items[items.len().saturating_sub(len)..];
    let mut seq = vec![0; len - tail.len()];
    seq.extend_from_slice(tail);
    seq
}

/// Runs `local_epochs` epochs of mini-batch SGD on one user's training
/// items. The local item table is reset to `global` first; every other
/// parameter group carries over from the previous round.
#[allow(clippy::too_many_arguments)]
pub fn local_train<R: Rng + ?Sized>(
    params: &mut ClientModelParams,
    shape: &ModelShape,
    text: &[f64],
    dataset: &InteractionDataset,
    user: usize,
    global: &Matrix,
    config: &TrainConfig,
    round: usize,
    rng: &mut R,
) -> Result<TrainReport> {
    if !(config.learning_rate >= 0.0)
        || !(config.item_lr_scale >= 0.0)
        || config.local_epochs == 0
        || config.batch_size == 0
    {
        return Err(Error::Parameter(format!("invalid local training config {config:?}")));
    }
    if global.shape() != params.item_table.shape() {
        return Err(Error::dim("local_train global table", global.shape_str(), params.item_table.shape_str()));
    }
    params.item_table.clone_from(global);
    params.item_table.row_mut(0).fill(0.0);

    let split = dataset.user(user);
    let sequence = pad_sequence(&split.train, shape.max_seq_len);
    let mut loss_sum = 0.0;
    let mut steps = 0;
    for _ in 0..config.local_epochs {
        let mut samples: Vec<(u32, f64)> =
            Vec::with_capacity(split.train.len() * (1 + config.negatives_per_positive));
        for &pos in &split.train {
            samples.push((pos, 1.0));
            if config.negatives_per_positive > 0 {
                for neg in sample_train_negatives(dataset, user, config.negatives_per_positive, rng)? {
                    samples.push((neg, 0.0));
                }
            }
        }
        samples.shuffle(rng);
        for chunk in samples.chunks(config.batch_size) {
            let batch = TrainingBatch {
                sequence: sequence.clone(),
                candidates: chunk.iter().map(|s| s.0).collect(),
                labels: chunk.iter().map(|s| s.1).collect(),
            };
            let (loss, grad) = loss_and_grad(params, shape, text, &batch, global, config.reg_lambda)?;
            if !loss.is_finite() || !grad.all_finite() {
                return Err(Error::Training {
                    round,
                    step: steps,
                    msg: format!("non-finite loss or gradient for user {}", split.user_id),
                });
            }
            params.sgd_step_split(&grad, config.learning_rate, config.learning_rate * config.item_lr_scale)?;
            loss_sum += loss;
            steps += 1;
        }
    }
    Ok(TrainReport {
        mean_loss: if steps == 0 { 0.0 } else { loss_sum / steps as f64 },
        steps,
    })
}

/// What a client sends to the server each round.
#[derive(Debug, Clone, PartialEq)]
pub struct UploadPacket {
    pub client_id: usize,
    /// Joint-embedding weight (or free user vector), possibly noised.
    pub user_weight: Matrix,
    /// Local item table, possibly noised. The padding row is never noised.
    pub item_table: Matrix,
}

impl UploadPacket {
    pub fn float_count(&self) -> usize {
        self.user_weight.len() + self.item_table.len()
    }
}

/// One draw from Laplace(0, scale) by inverse CDF.
pub fn laplace<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen::<f64>() - 0.5;
        let tail = 1.0 - 2.0 * u.abs();
        if tail > 0.0 {
            return -scale * u.signum() * tail.ln();
        }
    }
}

/// Copies the shared tensors, adding i.i.d. Laplace(0, α) noise when
/// `alpha > 0`. The client's own parameters are not modified.
pub fn prepare_upload<R: Rng + ?Sized>(
    params: &ClientModelParams,
    client_id: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<UploadPacket> {
    if !(alpha >= 0.0) {
        return Err(Error::Parameter(format!("noise intensity {alpha} < 0")));
    }
    let mut user_weight = params.user_weight.clone();
    let mut item_table = params.item_table.clone();
    if alpha > 0.0 {
        user_weight.as_mut_slice().iter_mut().for_each(|v| *v += laplace(alpha, rng));
        let d = item_table.cols();
        item_table.as_mut_slice()[d..]
            .iter_mut()
            .for_each(|v| *v += laplace(alpha, rng));
    }
    Ok(UploadPacket {
        client_id,
        user_weight,
        item_table,
    })
}
