//! Plain SGD training loop with halve-on-plateau learning-rate scheduling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::neural_core::{sgd_step, Trainable};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs without validation improvement before the learning rate halves.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            epochs: 15,
            seed: 1,
            patience: 2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// Mean training loss per example, per epoch.
    pub epoch_losses: Vec<f64>,
    pub validation_losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
}

/// Runs `cfg.epochs` passes of single-example SGD over `items`.
///
/// Items are visited in a seeded permutation of their canonical order, so the
/// caller's ordering never matters. `step` must return the example loss and
/// accumulate gradients; `validate`, when given, returns a validation loss used
/// to halve the learning rate after `patience` epochs without improvement.
pub fn train_loop<M, T, S, V>(
    model: &mut M,
    items: &[T],
    cfg: &TrainConfig,
    mut step: S,
    mut validate: Option<V>,
) -> TrainLog
where
    M: Trainable,
    T: Ord,
    S: FnMut(&mut M, &T) -> f64,
    V: FnMut(&M) -> f64,
{
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[a].cmp(&items[b]));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_0dd5);
    let mut lr = cfg.lr;
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut log = TrainLog::default();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            model.zero_grad();
            total += step(model, &items[i]);
            sgd_step(model, lr);
        }
        log.epoch_losses.push(total / items.len().max(1) as f64);
        log.learning_rates.push(lr);
        if let Some(val) = validate.as_mut() {
            let v = val(model);
            log.validation_losses.push(v);
            if v < best {
                best = v;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience.max(1) {
                    lr *= 0.5;
                    stale = 0;
                }
            }
        }
    }
    log
}
