//! Supervised fitting of the toy network on synthetic scenes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::SyntheticScene;
use super::toy::{ToyConfig, ToyModel};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Seeds both the initialization and the shuffling.
    pub seed: u64,
    pub model: ToyConfig,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 3e-3,
            batch_size: 8,
            seed: 0,
            model: ToyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean squared error per epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Regress the raw network output onto each scene's disparity with a
/// pixelwise squared error, then freeze the model.
///
/// `on_epoch(epoch, loss)` is called after every epoch.
pub fn train_toy_model(
    corpus: &[SyntheticScene],
    cfg: &ToyTrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(ToyModel, TrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    if !(cfg.learning_rate > 0.0) || cfg.batch_size == 0 {
        return Err(Error::Config(format!(
            "need learning_rate > 0 and batch_size >= 1, got {} and {}",
            cfg.learning_rate, cfg.batch_size
        )));
    }
    let mut model_cfg = cfg.model.clone();
    model_cfg.seed = cfg.seed;
    let mut model = ToyModel::new(model_cfg)?;
    for s in corpus {
        if s.image.shape() != model.config().input_shape {
            return Err(Error::ShapeMismatch {
                expected: model.config().input_shape,
                found: s.image.shape(),
            });
        }
    }

    let mut adam = Adam::new(model.param_count(), AdamConfig::default());
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut grad = vec![0.0; model.param_count()];
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let truth = corpus[i].true_disparity.data();
                let scale = 2.0 / (truth.len() * batch.len()) as f64;
                let mut sq = 0.0;
                model.param_gradient(
                    &corpus[i].image,
                    |out| {
                        out.iter()
                            .zip(truth)
                            .map(|(o, t)| {
                                sq += (o - t) * (o - t);
                                scale * (o - t)
                            })
                            .collect()
                    },
                    &mut grad,
                )?;
                epoch_loss += sq / truth.len() as f64;
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(diverged(cfg, epoch));
            }
            adam.step(model.params_mut()?, &grad, cfg.learning_rate);
        }
        let loss = epoch_loss / corpus.len() as f64;
        if !loss.is_finite() {
            return Err(diverged(cfg, epoch));
        }
        log::info!("toy model epoch {}/{}: mse {loss:.6}", epoch + 1, cfg.epochs);
        report.epoch_losses.push(loss);
        on_epoch(epoch, loss);
    }
    model.freeze();
    Ok((model, report))
}

fn diverged(cfg: &ToyTrainConfig, epoch: usize) -> Error {
    Error::Diverged {
        seed: cfg.seed,
        detail: format!(
            "non-finite loss at epoch {epoch} (lr {}, batch {}, widths {:?})",
            cfg.learning_rate, cfg.batch_size, cfg.model.widths
        ),
    }
}
