//! Closed-loop evaluation: episodes replan every few steps from a chunk
//! policy and are scored by the task's success predicate at the end.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::dataset::{derive_seed, EVAL_STREAM, PLAN_STREAM};
use crate::bench::observe::{build_episode_scene, EpisodeScene};
use crate::bench::task::{make_env, scripted_expert, EnvState, ACTION_DIM};
use crate::bench::BenchConfig;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::policy::{load_checkpoint, Policy};

/// Anything that proposes an action chunk from the current state.
pub trait ChunkPolicy: Sync {
    fn plan(&self, scene: &EpisodeScene, state: &EnvState, seed: u64) -> Result<Matrix>;
}

impl ChunkPolicy for Policy {
    fn plan(&self, scene: &EpisodeScene, state: &EnvState, seed: u64) -> Result<Matrix> {
        self.act(&scene.observe(state)?, seed)
    }
}

/// The scripted expert behind the policy interface.
pub struct ExpertPolicy {
    pub config: BenchConfig,
}

impl ChunkPolicy for ExpertPolicy {
    fn plan(&self, _scene: &EpisodeScene, state: &EnvState, _seed: u64) -> Result<Matrix> {
        scripted_expert(&self.config.task, state, self.config.policy.denoiser.horizon)
    }
}

/// Uniform actions inside the per-step limits, gripper closed.
pub struct RandomPolicy {
    pub horizon: usize,
    pub max_step: [f64; 3],
}

impl ChunkPolicy for RandomPolicy {
    fn plan(&self, _scene: &EpisodeScene, _state: &EnvState, seed: u64) -> Result<Matrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Matrix::from_fn(self.horizon, ACTION_DIM, |_, j| {
            if j == 3 {
                1.0
            } else {
                rng.random_range(-self.max_step[j]..=self.max_step[j])
            }
        }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub seeds: Vec<u64>,
    pub success_rates: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation across seeds (0 for one seed).
    pub std: f64,
    pub episodes_per_seed: usize,
    pub config_hash: String,
}

impl EvalReport {
    pub fn from_rates(cfg: &BenchConfig, seeds: &[u64], rates: Vec<f64>, episodes: usize) -> Self {
        let n = rates.len() as f64;
        let mean = rates.iter().sum::<f64>() / n;
        let std = if rates.len() > 1 {
            (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            task: cfg.task.name.clone(),
            seeds: seeds.to_vec(),
            success_rates: rates,
            mean,
            std,
            episodes_per_seed: episodes,
            config_hash: cfg.hash(),
        }
    }
}

/// One closed-loop episode. Expert failures count as unsuccessful; other
/// errors propagate.
pub fn run_episode(policy: &dyn ChunkPolicy, cfg: &BenchConfig, env_seed: u64, plan_seed: u64) -> Result<bool> {
    let mut env = make_env(&cfg.task, env_seed)?;
    let s0 = env.reset();
    let scene = build_episode_scene(cfg.task.object(), &s0.pose, &cfg.observation)?;
    let replan = cfg.eval.replan_every;
    let mut step = 0;
    let mut call = 0u64;
    while step < cfg.task.episode_steps {
        let chunk = match policy.plan(&scene, env.state(), derive_seed(plan_seed, PLAN_STREAM, call)) {
            Ok(c) => c,
            Err(Error::ExpertFailure(_)) => return Ok(false),
            Err(e) => return Err(e),
        };
        call += 1;
        let n = replan.min(chunk.rows()).min(cfg.task.episode_steps - step);
        if n == 0 {
            return Err(Error::invalid("policy returned an empty chunk"));
        }
        for row in chunk.iter_rows().take(n) {
            env.step(row)?;
        }
        step += n;
    }
    Ok(env.success())
}

/// Success rate of `policy` over `episodes` resets drawn from `seed`.
pub fn success_rate(policy: &dyn ChunkPolicy, cfg: &BenchConfig, episodes: usize, seed: u64) -> Result<f64> {
    let wins = (0..episodes as u64)
        .into_par_iter()
        .map(|i| {
            let env_seed = derive_seed(seed, EVAL_STREAM, i);
            run_episode(policy, cfg, env_seed, env_seed)
        })
        .collect::<Result<Vec<bool>>>()?
        .into_iter()
        .filter(|&s| s)
        .count();
    Ok(wins as f64 / episodes as f64)
}

/// Evaluates one policy under every seed.
pub fn evaluate(policy: &dyn ChunkPolicy, cfg: &BenchConfig, episodes: usize, seeds: &[u64]) -> Result<EvalReport> {
    evaluate_models(&vec![policy; seeds.len()], cfg, episodes, seeds)
}

/// Evaluates `models[i]` (typically trained with `seeds[i]`) under `seeds[i]`.
pub fn evaluate_models(
    models: &[&dyn ChunkPolicy],
    cfg: &BenchConfig,
    episodes: usize,
    seeds: &[u64],
) -> Result<EvalReport> {
    if seeds.is_empty() || episodes == 0 {
        return Err(Error::invalid("evaluation needs at least one seed and episode"));
    }
    if models.len() != seeds.len() {
        return Err(Error::invalid("one model per seed is required"));
    }
    let rates = models
        .iter()
        .zip(seeds)
        .map(|(m, &s)| success_rate(*m, cfg, episodes, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rates(cfg, seeds, rates, episodes))
}

/// Loads one checkpoint per seed, checking each against `cfg.policy`.
pub fn evaluate_checkpoints(
    paths: &[&Path],
    cfg: &BenchConfig,
    episodes: usize,
    seeds: &[u64],
) -> Result<EvalReport> {
    let policies = paths
        .iter()
        .map(|p| load_checkpoint(p, Some(&cfg.policy)))
        .collect::<Result<Vec<_>>>()?;
    let models: Vec<&dyn ChunkPolicy> = if policies.len() == 1 {
        vec![&policies[0]; seeds.len()]
    } else {
        policies.iter().map(|p| p as &dyn ChunkPolicy).collect()
    };
    evaluate_models(&models, cfg, episodes, seeds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchConfig {
        let mut c = BenchConfig::default();
        c.eval.episodes_per_seed = 20;
        c
    }

    #[test]
    fn expert_solves_every_episode() {
        let c = small();
        let r = evaluate(&ExpertPolicy { config: c.clone() }, &c, 20, &[0, 1]).unwrap();
        assert_eq!(r.success_rates, vec![1.0, 1.0]);
        assert_eq!(r.std, 0.0);
    }

    #[test]
    fn random_policy_rarely_succeeds() {
        let c = small();
        let p = RandomPolicy {
            horizon: 8,
            max_step: c.task.max_step,
        };
        let r = evaluate(&p, &c, 40, &[3]).unwrap();
        assert!(r.mean <= 0.05, "{r:?}");
    }
}
