//! Minibatch training with Adam and early stopping on validation loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{bce_grad, bce_loss};
use super::model::{Mode, Model, ModelSpec};
use super::optim::{Adam, AdamConfig};
use super::tensor::Tensor;
use super::NeuralError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    /// Epochs without a new best validation loss before stopping.
    pub patience: usize,
    pub seed: u64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 1e-3, batch: 16, max_epochs: 100, patience: 10, seed: 0, val_fraction: 0.1 }
    }
}

/// One training pair; inputs are kept at storage precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Vec<f32>,
    pub target: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights restored to the best validation epoch.
    pub model: Model,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn best_val_loss(&self) -> f64 {
        self.curve[self.best_epoch].val_loss
    }
}

/// Builds a `[B, ..sample_shape]` tensor from the given examples.
pub fn batch_tensor(examples: &[&Example], sample_shape: &[usize]) -> Result<Tensor, NeuralError> {
    let mut shape = vec![examples.len()];
    shape.extend_from_slice(sample_shape);
    let data = examples.iter().flat_map(|e| e.input.iter().map(|&v| v as f64)).collect();
    Tensor::new(shape, data)
}

fn batch_targets(examples: &[&Example]) -> Vec<f64> {
    examples.iter().flat_map(|e| e.target.iter().map(|&v| v as f64)).collect()
}

/// Mean loss of `model` over `examples` in eval mode.
pub fn evaluate_loss(model: &Model, examples: &[&Example], chunk: usize) -> Result<f64, NeuralError> {
    let mut total = 0.0;
    for part in examples.chunks(chunk.max(1)) {
        let x = batch_tensor(part, &model.spec().input_shape)?;
        let scores = model.predict(&x)?;
        total += bce_loss(scores.data(), &batch_targets(part)) * part.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Loss and gradients of one batch.
pub fn loss_and_grad(
    model: &Model,
    x: &Tensor,
    targets: &[f64],
    mode: Mode<'_>,
) -> Result<(f64, super::model::Gradients), NeuralError> {
    let trace = model.forward(x, mode)?;
    let loss = bce_loss(trace.output(), targets);
    let grads = model.backward(&trace, &bce_grad(trace.output(), targets));
    Ok((loss, grads))
}

/// Deterministic train/validation split of `n` indices.
pub fn split_indices(n: usize, val_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = ((n as f64 * val_fraction).ceil() as usize).clamp(1, n.saturating_sub(1));
    let train = idx.split_off(n_val);
    (train, idx)
}

pub fn train(examples: &[Example], spec: ModelSpec, cfg: &TrainConfig) -> Result<TrainOutcome, NeuralError> {
    train_with_progress(examples, spec, cfg, |_| {})
}

pub fn train_with_progress(
    examples: &[Example],
    spec: ModelSpec,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, NeuralError> {
    if cfg.batch == 0 || cfg.patience == 0 || cfg.max_epochs == 0 {
        return Err(NeuralError::Config("batch, patience and max_epochs must be at least 1".into()));
    }
    if !(cfg.val_fraction > 0.0 && cfg.val_fraction < 1.0) {
        return Err(NeuralError::Config(format!("val_fraction {} outside (0, 1)", cfg.val_fraction)));
    }
    if examples.len() < 2 * cfg.batch {
        return Err(NeuralError::Config(format!(
            "need at least two batches ({} examples), got {}",
            2 * cfg.batch,
            examples.len()
        )));
    }

    // the split draws from its own stream so every architecture trained
    // with the same seed sees the same validation set
    let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    split_rng.set_stream(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(spec, &mut rng)?;
    let input_len = model.input_len();
    if let Some(bad) = examples.iter().find(|e| e.input.len() != input_len || e.target.len() != model.output_dim()) {
        return Err(NeuralError::Shape(format!(
            "example has {} inputs / {} targets, model wants {} / {}",
            bad.input.len(),
            bad.target.len(),
            input_len,
            model.output_dim()
        )));
    }

    let (mut train_idx, val_idx) = split_indices(examples.len(), cfg.val_fraction, &mut split_rng);
    let val: Vec<&Example> = val_idx.iter().map(|&i| &examples[i]).collect();
    let shape = model.spec().input_shape.clone();
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, model.params().iter().map(|p| p.len()));

    let mut curve = Vec::new();
    let mut best: Option<(usize, f64, Vec<Vec<f64>>)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut sum = 0.0;
        for (b, chunk) in train_idx.chunks(cfg.batch).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let x = batch_tensor(&batch, &shape)?;
            let (loss, grads) = loss_and_grad(&model, &x, &batch_targets(&batch), Mode::Train(&mut rng))?;
            if !loss.is_finite() || !grads.0.iter().flatten().all(|g| g.is_finite()) {
                let norms: Vec<String> = model
                    .params()
                    .iter()
                    .map(|p| format!("{:.4e}", p.iter().map(|v| v * v).sum::<f64>().sqrt()))
                    .collect();
                return Err(NeuralError::NonFinite(format!(
                    "loss {loss} at epoch {epoch} batch {b}; previous epochs {:?}; weight norms [{}]",
                    curve.iter().map(|r: &EpochRecord| r.train_loss).collect::<Vec<_>>(),
                    norms.join(", ")
                )));
            }
            sum += loss * chunk.len() as f64;
            adam.step(model.params_mut(), &grads.0);
        }
        let record = EpochRecord {
            epoch,
            train_loss: sum / train_idx.len() as f64,
            val_loss: evaluate_loss(&model, &val, 64)?,
        };
        if !record.val_loss.is_finite() {
            return Err(NeuralError::NonFinite(format!("validation loss {} at epoch {epoch}", record.val_loss)));
        }
        on_epoch(&record);
        curve.push(record);

        if best.as_ref().is_none_or(|(_, l, _)| record.val_loss < *l) {
            best = Some((epoch, record.val_loss, model.params().into_iter().cloned().collect()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_epoch, _, weights) = best.expect("at least one epoch ran");
    model.set_params(weights)?;
    Ok(TrainOutcome { model, curve, best_epoch, stopped_early })
}
