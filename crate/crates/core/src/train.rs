//! Plain cross-entropy training and evaluation of an unmasked model.

use log::info;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::Adam;
use crate::rng::{self, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch_size: 32,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Top-1 accuracy in `[0, 1]`, evaluated in chunks of `batch_size`.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let logits = model.forward(&x)?;
        let c = logits.shape()[1];
        for (row, &label) in logits.data().chunks(c).zip(&y) {
            let pred = (0..c).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap_or(0);
            correct += usize::from(pred == label);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains every weight of `model` with Adam on cross-entropy. Returns one
/// log line per epoch; with `epochs = 0` the model is untouched.
pub fn train(model: &mut Model, train: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::config("lr", "must be positive"));
    }
    if train.num_classes != model.config.num_classes {
        return Err(Error::config(
            "num_classes",
            format!("model has {} classes, data {}", model.config.num_classes, train.num_classes),
        ));
    }
    let mut opt = Adam::new(cfg.lr).with_weight_decay(cfg.weight_decay);
    let mut rng = rng::stream(cfg.seed, Stream::Shuffle);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng::shuffle(&mut rng, &mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk)?;
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let logits = model.forward_tape(&mut tape, &vars, &x, None)?;
            let loss = tape.cross_entropy(logits, &y)?;
            total += tape.value(loss).item();
            batches += 1;
            tape.backward(loss)?;
            let grads: Vec<_> = vars.all().into_iter().map(|v| tape.grad(v)).collect();
            opt.step(&mut model.params_mut(), &grads);
        }
        let log = EpochLog {
            epoch,
            loss: total / batches as f64,
            train_accuracy: evaluate(model, train, cfg.batch_size)?,
            test_accuracy: test.map(|t| evaluate(model, t, cfg.batch_size)).transpose()?,
        };
        match log.test_accuracy {
            Some(t) => info!("epoch {epoch}: loss {:.4} train acc {:.4} test acc {t:.4}", log.loss, log.train_accuracy),
            None => info!("epoch {epoch}: loss {:.4} train acc {:.4}", log.loss, log.train_accuracy),
        }
        logs.push(log);
    }
    Ok(logs)
}

/// Fine-tunes a pruned model; identical to [`train`] but named for the
/// pipeline phase.
pub fn finetune(model: &mut Model, train_set: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    model.frozen = false;
    train(model, train_set, test, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, Split};
    use crate::model::{build_model, ModelConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 16,
            heads: 2,
            mlp_ratio: 2,
            depth: 1,
            num_classes: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut m = build_model(&tiny()).unwrap();
        let before = m.clone();
        let ds = synth_dataset(0, 2, 4, 8, 0.1, Split::Train).unwrap();
        let logs = train(&mut m, &ds, None, &TrainConfig { epochs: 0, ..TrainConfig::default() }).unwrap();
        assert!(logs.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn training_fits_a_small_task_deterministically() {
        let ds = synth_dataset(0, 2, 16, 8, 0.05, Split::Train).unwrap();
        let cfg = TrainConfig {
            epochs: 15,
            lr: 3e-3,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let mut a = build_model(&tiny()).unwrap();
        let la = train(&mut a, &ds, None, &cfg).unwrap();
        let mut b = build_model(&tiny()).unwrap();
        let lb = train(&mut b, &ds, None, &cfg).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a, b);
        assert!(la.last().unwrap().train_accuracy >= 0.9, "{la:?}");
        assert!(la.last().unwrap().loss < la[0].loss);
    }
}
