//! Conditional diffusion policy: schedule, denoiser, sampling, training and
//! checkpoints.

pub mod checkpoint;
pub mod denoiser;
pub mod diffusion;
pub mod schedule;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::condition::{ConditionConfig, Conditioner, Observation, PartEmbeddingSet, Toggles};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{Graph, ParamStore, Var};

pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint};
pub use denoiser::{Denoiser, DenoiserConfig};
pub use diffusion::{
    add_noise, denoise_step, sample, training_loss, ActionTrajectory, ConditionBundle, NoiseDraw,
    NoisePredictor, SamplerOptions,
};
pub use schedule::{make_schedule, NoiseSchedule};
pub use train::{train, MetricsRecord, TrainConfig, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sampler: SamplerOptions,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 2e-2,
            sampler: SamplerOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub condition: ConditionConfig,
    pub denoiser: DenoiserConfig,
    pub diffusion: DiffusionConfig,
    pub toggles: Toggles,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

/// Per-dimension affine map of actions onto `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionNormalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ActionNormalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            min: vec![-1.0; dim],
            max: vec![1.0; dim],
        }
    }

    /// Fits the range of every column over all trajectories.
    pub fn fit<'a>(trajectories: impl IntoIterator<Item = &'a Matrix>, dim: usize) -> Self {
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        for t in trajectories {
            for r in t.iter_rows() {
                for j in 0..dim {
                    min[j] = min[j].min(r[j]);
                    max[j] = max[j].max(r[j]);
                }
            }
        }
        for j in 0..dim {
            if !min[j].is_finite() || !max[j].is_finite() {
                min[j] = -1.0;
                max[j] = 1.0;
            } else if max[j] - min[j] < 1e-8 {
                min[j] -= 1.0;
                max[j] += 1.0;
            }
        }
        Self { min, max }
    }

    pub fn normalize(&self, a: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), a.cols(), |i, j| {
            2.0 * (a[(i, j)] - self.min[j]) / (self.max[j] - self.min[j]) - 1.0
        })
    }

    pub fn denormalize(&self, a: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), a.cols(), |i, j| {
            (a[(i, j)] + 1.0) * 0.5 * (self.max[j] - self.min[j]) + self.min[j]
        })
    }
}

/// Conditioner, denoiser, schedule and parameters of one trained policy.
#[derive(Clone, Debug)]
pub struct Policy {
    pub config: PolicyConfig,
    pub store: ParamStore,
    pub conditioner: Conditioner,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub normalizer: ActionNormalizer,
}

impl Policy {
    pub fn new(config: PolicyConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let conditioner = Conditioner::new(&mut store, config.condition.clone(), config.toggles, &mut rng)?;
        let denoiser = Denoiser::new(&mut store, config.denoiser.clone(), &config.condition, &mut rng)?;
        let d = &config.diffusion;
        let schedule = make_schedule(d.steps, d.beta_start, d.beta_end)?;
        let normalizer = ActionNormalizer::identity(config.denoiser.action_dim);
        Ok(Self {
            config,
            store,
            conditioner,
            denoiser,
            schedule,
            normalizer,
        })
    }

    pub fn action_shape(&self) -> (usize, usize) {
        (self.config.denoiser.horizon, self.config.denoiser.action_dim)
    }

    /// Global condition and (refined) part set for one observation.
    pub fn condition(&self, obs: &Observation) -> Result<ConditionBundle> {
        let mut g = Graph::new(&self.store);
        let out = self.conditioner.forward(&mut g, &[obs])?;
        Ok(ConditionBundle {
            global: g.value(out.global).row(0).to_vec(),
            parts: out.parts.map(|p| PartEmbeddingSet {
                embeddings: g.value(p).clone(),
            }),
        })
    }

    /// A normalized trajectory sampled with the configured sampler.
    pub fn sample_normalized(&self, obs: &Observation, seed: u64) -> Result<Matrix> {
        let c = self.condition(obs)?;
        sample(
            &self.denoiser.bind(&self.store),
            &c,
            &self.schedule,
            self.action_shape(),
            seed,
            self.config.diffusion.sampler,
        )
    }

    /// A trajectory in action units.
    pub fn act(&self, obs: &Observation, seed: u64) -> Result<Matrix> {
        Ok(self.normalizer.denormalize(&self.sample_normalized(obs, seed)?))
    }

    /// Denoising loss for a batch of `(observation, normalized actions)` with
    /// the given noise draws; differentiable in every parameter.
    pub fn loss(
        &self,
        g: &mut Graph,
        batch: &[(&Observation, &Matrix)],
        draws: &[NoiseDraw],
    ) -> Result<Var> {
        if batch.is_empty() || batch.len() != draws.len() {
            return Err(Error::invalid("batch and noise draws must be nonempty and aligned"));
        }
        let shape = self.action_shape();
        let mut noisy = Vec::with_capacity(batch.len());
        let mut eps = Vec::with_capacity(batch.len());
        for ((_, a0), d) in batch.iter().zip(draws) {
            if a0.shape() != shape {
                return Err(Error::invalid(format!(
                    "trajectory shape {:?}, policy expects {shape:?}",
                    a0.shape()
                )));
            }
            noisy.push(add_noise(a0, d.t, &d.eps, &self.schedule)?);
            eps.push(&d.eps);
        }
        let obs: Vec<&Observation> = batch.iter().map(|(o, _)| *o).collect();
        let cond = self.conditioner.forward(g, &obs)?;
        let noisy_refs: Vec<&Matrix> = noisy.iter().collect();
        let a_t = g.constant(Matrix::vcat(&noisy_refs));
        let target = g.constant(Matrix::vcat(&eps));
        let steps: Vec<usize> = draws.iter().map(|d| d.t).collect();
        let parts = cond.parts.map(|p| (p, cond.part_counts.as_slice()));
        let pred = self.denoiser.forward(g, a_t, &steps, cond.global, parts);
        let diff = g.sub(pred, target);
        let sq = g.square(diff);
        let total = g.sum_all(sq);
        Ok(g.scale(total, 1.0 / batch.len() as f64))
    }
}
