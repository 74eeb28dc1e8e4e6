use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::condition::Observation;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{cosine_lr, AdamW, AdamWConfig, Graph};
use crate::policy::diffusion::draw_noise;
use crate::policy::{ActionNormalizer, Policy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 32,
            lr: 1e-3,
            warmup: 100,
            min_lr_ratio: 0.05,
            weight_decay: 1e-6,
            clip_norm: Some(1.0),
            seed: 0,
            log_every: 50,
        }
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub iterations: usize,
    /// Mean loss over the last logging window.
    pub final_loss: f64,
}

/// Fits the action normalizer on `data`, then optimizes the denoising loss.
/// `log` receives a record every `log_every` steps and after the last step.
pub fn train(
    policy: &mut Policy,
    data: &[(Observation, Matrix)],
    cfg: &TrainConfig,
    mut log: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::invalid("no training data"));
    }
    if cfg.batch_size == 0 || cfg.iterations == 0 {
        return Err(Error::invalid("batch_size and iterations must be positive"));
    }
    let dim = policy.config.denoiser.action_dim;
    policy.normalizer = ActionNormalizer::fit(data.iter().map(|(_, a)| a), dim);
    let targets: Vec<Matrix> = data.iter().map(|(_, a)| policy.normalizer.normalize(a)).collect();

    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
            ..Default::default()
        },
        &policy.store,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shape = policy.action_shape();
    let mut window = Vec::new();
    let mut final_loss = f64::NAN;
    for step in 0..cfg.iterations {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let draws: Vec<_> = idx.iter().map(|_| draw_noise(shape, &policy.schedule, &mut rng)).collect();
        let batch: Vec<(&Observation, &Matrix)> = idx.iter().map(|&i| (&data[i].0, &targets[i])).collect();
        let (loss, grads) = {
            let mut g = Graph::new(&policy.store);
            let l = policy.loss(&mut g, &batch, &draws)?;
            (g.scalar(l), g.backward(l).into_param_grads())
        };
        if !loss.is_finite() {
            return Err(Error::invalid(format!("training diverged at step {step}")));
        }
        let lr = cosine_lr(cfg.lr, step, cfg.iterations, cfg.warmup, cfg.min_lr_ratio);
        opt.step(&mut policy.store, &grads, lr);
        window.push(loss);
        let last = step + 1 == cfg.iterations;
        if (cfg.log_every > 0 && (step + 1) % cfg.log_every == 0) || last {
            final_loss = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            let w = policy.conditioner.fusion_weights(&policy.store);
            log(&MetricsRecord {
                step: step + 1,
                loss: final_loss,
                lr,
                alpha: w.alpha,
                beta: w.beta,
            })?;
        }
    }
    Ok(TrainReport {
        iterations: cfg.iterations,
        final_loss,
    })
}
