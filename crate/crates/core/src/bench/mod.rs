//! Synthetic pose-aware benchmark: task, expert, dataset, evaluation,
//! ablations and field visualization.

pub mod ablation;
pub mod dataset;
pub mod eval;
pub mod observe;
pub mod task;
pub mod viz;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::condition::{ConditionConfig, Toggles};
use crate::error::{Error, Result};
use crate::policy::{config_hash, DenoiserConfig, DiffusionConfig, PolicyConfig, TrainConfig};

pub use ablation::{run_ablation, AblationRow, AblationTable};
pub use dataset::{generate_dataset, read_dataset, training_pairs, EpisodeRecord};
pub use eval::{evaluate, evaluate_models, ChunkPolicy, EvalReport, ExpertPolicy, RandomPolicy};
pub use observe::{build_episode_scene, EpisodeScene, ObservationConfig};
pub use task::{make_env, scripted_expert, Env, EnvState, PlanarPose, TaskSpec, ToyObject};
pub use viz::visualize_field;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub episodes: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { episodes: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes_per_seed: usize,
    pub seeds: Vec<u64>,
    /// Steps executed from each sampled chunk before replanning.
    pub replan_every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes_per_seed: 100,
            seeds: vec![0, 1, 2],
            replan_every: 4,
        }
    }
}

/// Complete configuration of the benchmark and of the policy trained on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub task: TaskSpec,
    pub observation: ObservationConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
    pub eval: EvalConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let observation = ObservationConfig::default();
        let policy = PolicyConfig {
            condition: ConditionConfig {
                feature_dim: observation.pca_dim,
                robot_dim: task::ROBOT_DIM,
                point_hidden: 32,
                scene_dim: 32,
                robot_hidden: 16,
                robot_embed_dim: 8,
                part_dim: 16,
                attn_dim: 16,
                heads: 1,
                refine_residual: true,
                zero_init_output: true,
                position_scale: 10.0,
            },
            denoiser: DenoiserConfig {
                horizon: 8,
                action_dim: task::ACTION_DIM,
                channels: 32,
                step_embed_dim: 16,
                zero_init_output: false,
            },
            diffusion: DiffusionConfig::default(),
            toggles: Toggles::ALL,
            init_seed: 0,
        };
        Self {
            task: TaskSpec::default(),
            observation,
            policy,
            train: TrainConfig::default(),
            dataset: DatasetConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.observation.validate()?;
        let c = &self.policy.condition;
        let d = &self.policy.denoiser;
        c.validate().map_err(|e| Error::Config(e.to_string()))?;
        d.validate().map_err(|e| Error::Config(e.to_string()))?;
        if c.feature_dim != self.observation.pca_dim {
            return Err(Error::Config(format!(
                "policy.condition.feature_dim ({}) must equal observation.pca_dim ({})",
                c.feature_dim, self.observation.pca_dim
            )));
        }
        if c.robot_dim != task::ROBOT_DIM {
            return Err(Error::Config(format!("policy.condition.robot_dim must be {}", task::ROBOT_DIM)));
        }
        if d.action_dim != task::ACTION_DIM {
            return Err(Error::Config(format!("policy.denoiser.action_dim must be {}", task::ACTION_DIM)));
        }
        if self.eval.replan_every == 0 || self.eval.replan_every > d.horizon {
            return Err(Error::Config("eval.replan_every must lie in 1..=horizon".into()));
        }
        if self.eval.seeds.is_empty() || self.eval.episodes_per_seed == 0 {
            return Err(Error::Config("evaluation needs at least one seed and episode".into()));
        }
        if self.dataset.episodes == 0 {
            return Err(Error::Config("dataset.episodes must be positive".into()));
        }
        Ok(())
    }

    /// Parses JSON layered over the benchmark defaults: absent fields, at
    /// any depth, keep their default values.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if !user.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let mut base = serde_json::to_value(Self::default()).expect("config serializes");
        merge(&mut base, user);
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a JSON config (see [`BenchConfig::from_json`]).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    /// Hash of the parts of the config that determine generated data.
    pub fn data_hash(&self) -> String {
        config_hash(&(&self.task, &self.observation))
    }

    pub fn with_toggles(&self, toggles: Toggles) -> Self {
        let mut c = self.clone();
        c.policy.toggles = toggles;
        c
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
