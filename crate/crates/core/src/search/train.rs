use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{shuffled_batches, weight_step, Batch, LossKind};
use crate::data::Dataset;
use crate::engine::Sgd;
use crate::error::{Error, Result};
use crate::supernet::{DiscreteArchitecture, Supernet};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Initial learning rate, annealed to zero along a cosine.
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub margin: f64,
    /// Joint gradient-norm limit; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Output width of an embedding head.
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.2,
            momentum: 0.9,
            weight_decay: 3e-4,
            epochs: 30,
            batch_size: 32,
            loss: LossKind::CrossEntropy,
            margin: 1.0,
            grad_clip: Some(5.0),
            embedding_dim: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * epoch as f64 / self.epochs as f64).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainTraceRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Supernet<f32>,
    pub trace: Vec<TrainTraceRow>,
}

/// Trains `arch` from freshly initialized weights.
pub fn train_final(
    arch: &DiscreteArchitecture,
    train: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if config.epochs == 0 || config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::Contract(
            "training needs epochs >= 1, batch size >= 1 and lr > 0".into(),
        ));
    }
    if train.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    if arch.head != config.loss.head() {
        return Err(Error::Contract(format!(
            "{} head cannot be trained with {:?}",
            arch.head, config.loss
        )));
    }
    let out_dim = match config.loss {
        LossKind::CrossEntropy => train.n_classes,
        LossKind::Triplet => config.embedding_dim,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = Supernet::<f32>::from_architecture(arch, out_dim, &mut rng)?;
    let mut opt = Sgd::new(config.lr, config.momentum, config.weight_decay);
    opt.clip_norm = config.grad_clip;
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        opt.lr = config.lr_at(epoch);
        let batches = shuffled_batches(train.len(), config.batch_size, &mut rng);
        let mut total = 0.0;
        for b in &batches {
            let batch = Batch::sample(train, b, config.loss, &mut rng)?;
            total += weight_step(&mut net, &batch, &mut opt, config.margin)?;
        }
        trace.push(TrainTraceRow {
            epoch,
            lr: opt.lr,
            train_loss: total / batches.len() as f64,
        });
    }
    Ok(TrainOutcome { net, trace })
}
