use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Example, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with a fixed learning rate and seeded shuffling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            epochs: 4,
            batch_size: 32,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Trains `model` in place on `dataset`.
pub fn train(model: &mut Model, dataset: &[Example], cfg: &TrainConfig) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if !(cfg.learning_rate >= 0.0) || cfg.batch_size == 0 {
        return Err(Error::Config(
            "learning rate must be nonnegative and batch size positive".into(),
        ));
    }
    let eval_batch = 64;
    let initial_loss = model.mean_loss(dataset, None, eval_batch)?;

    let mut m: Vec<Tensor> = model.params.refs().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut v = m.clone();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = idx.iter().map(|&i| dataset[i].clone()).collect();
            let back = model.forward(&batch, None)?.backward()?;
            if !back.loss.is_finite() {
                return Err(Error::Training {
                    step,
                    loss: back.loss,
                });
            }
            sum += back.loss;
            batches += 1;
            step += 1;

            let grads = back.params.refs();
            let clip = match cfg.clip_norm {
                Some(c) => {
                    let norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
                    if norm > c {
                        c / norm
                    } else {
                        1.0
                    }
                }
                None => 1.0,
            };
            let bc1 = 1.0 - cfg.beta1.powi(step as i32);
            let bc2 = 1.0 - cfg.beta2.powi(step as i32);
            for (((p, g), mi), vi) in model
                .params
                .refs_mut()
                .into_iter()
                .zip(grads)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let pd = p.data_mut();
                for (((w, &gr), mm), vv) in pd
                    .iter_mut()
                    .zip(g.data())
                    .zip(mi.data_mut())
                    .zip(vi.data_mut())
                {
                    let gr = gr * clip;
                    *mm = cfg.beta1 * *mm + (1.0 - cfg.beta1) * gr;
                    *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gr * gr;
                    *w -= cfg.learning_rate * (*mm / bc1) / ((*vv / bc2).sqrt() + cfg.eps);
                }
            }
            if !model.params.all_finite() {
                return Err(Error::Training {
                    step,
                    loss: f64::NAN,
                });
            }
        }
        epoch_losses.push(sum / batches as f64);
    }

    let final_loss = model.mean_loss(dataset, None, eval_batch)?;
    Ok(TrainReport {
        initial_loss,
        final_loss,
        epoch_losses,
        steps: step,
    })
}
