//! Expert demonstrations on disk: one directory per episode holding the
//! lifted sources, per-timestep field files, the partition, action arrays
//! and a JSON manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::observe::{build_episode_scene, EpisodeScene};
use crate::bench::task::{make_env, scripted_expert, EnvState};
use crate::bench::BenchConfig;
use crate::condition::{LiftedSources, Observation};
use crate::error::{Error, Result};
use crate::geometry::{read_cloud_text, write_cloud_text};
use crate::linalg::Matrix;
use crate::partition::{LocalFieldSet, PartitionFile};
use crate::semlift::field_file_name;

/// Seed streams keep demonstration, evaluation and sampling draws disjoint.
pub const DEMO_STREAM: u64 = 1;
pub const EVAL_STREAM: u64 = 2;
pub const PLAN_STREAM: u64 = 3;

/// Mixes `(base, stream, index)` into an independent 64-bit seed.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index.wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One expert episode: `states[t]` is observed before `executed` row `t`,
/// and `chunks[t]` is the expert's full plan from `states[t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub states: Vec<EnvState>,
    pub chunks: Vec<Matrix>,
    pub executed: Matrix,
    pub success: bool,
    pub scene: EpisodeScene,
}

/// Runs the expert closed-loop from the reset drawn with `seed`.
pub fn run_expert_episode(cfg: &BenchConfig, seed: u64) -> Result<EpisodeRecord> {
    let mut env = make_env(&cfg.task, seed)?;
    let s0 = env.reset();
    let scene = build_episode_scene(cfg.task.object(), &s0.pose, &cfg.observation)?;
    let horizon = cfg.policy.denoiser.horizon;
    let mut states = vec![s0];
    let mut chunks = Vec::new();
    let mut executed = Vec::new();
    for _ in 0..cfg.task.episode_steps {
        let chunk = scripted_expert(&cfg.task, env.state(), horizon)?;
        let row = chunk.row(0).to_vec();
        states.push(env.step(&row)?);
        executed.push(row);
        chunks.push(chunk);
    }
    Ok(EpisodeRecord {
        seed,
        states,
        chunks,
        executed: Matrix::from_rows(&executed),
        success: env.success(),
        scene,
    })
}

impl EpisodeRecord {
    /// Replays the executed actions open-loop from the recorded reset.
    pub fn replay_success(&self, cfg: &BenchConfig) -> Result<bool> {
        let mut env = make_env(&cfg.task, self.seed)?;
        env.reset();
        for row in self.executed.iter_rows() {
            env.step(row)?;
        }
        Ok(env.success())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EpisodeManifest {
    seed: u64,
    steps: usize,
    horizon: usize,
    action_dim: usize,
    feature_dim: usize,
    success: bool,
    states: Vec<EnvState>,
    initial_pose: crate::bench::task::PlanarPose,
    data_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task: String,
    pub episodes: usize,
    pub seed: u64,
    /// Reset draws tried, including discarded expert failures.
    pub attempts: usize,
    pub data_hash: String,
    pub episode_dirs: Vec<String>,
}

const MANIFEST: &str = "manifest.json";
const SOURCES: &str = "sources.txt";
const PARTITION: &str = "partition.json";
const ACTIONS: &str = "actions.txt";
const EXECUTED: &str = "executed.txt";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes matrices as a `count rows cols` header then one row per line.
fn write_matrices(path: &Path, ms: &[&Matrix]) -> Result<()> {
    let (r, c) = ms.first().map_or((0, 0), |m| m.shape());
    let mut out = format!("{} {r} {c}\n", ms.len());
    for m in ms {
        for row in m.iter_rows() {
            let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

fn read_matrices(path: &Path) -> Result<Vec<Matrix>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<usize> = lines
        .next()
        .unwrap_or("")
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    let [n, r, c] = header[..] else {
        return Err(Error::format(path, "header must be `count rows cols`"));
    };
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let line = lines
                .next()
                .ok_or_else(|| Error::format(path, format!("missing row {i} of matrix {k}")))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(path, format!("matrix {k} row {i}: {e}")))?;
            if vals.len() != c {
                return Err(Error::format(path, format!("matrix {k} row {i} has {} values", vals.len())));
            }
            data.extend(vals);
        }
        out.push(Matrix::new(r, c, data));
    }
    Ok(out)
}

pub fn episode_dir_name(i: usize) -> String {
    format!("episode_{i:04}")
}

pub fn write_episode(dir: &Path, rec: &EpisodeRecord, cfg: &BenchConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let src = &rec.scene.sources;
    write_cloud_text(
        &dir.join(SOURCES),
        &src.points,
        Some(&Matrix::hcat(&[&src.source_a, &src.source_b])),
    )?;
    rec.scene.partition.to_json().write(&dir.join(PARTITION))?;
    for (t, s) in rec.states.iter().enumerate() {
        rec.scene.field(s, t)?.write_text(&dir.join(field_file_name(t)))?;
    }
    let chunks: Vec<&Matrix> = rec.chunks.iter().collect();
    write_matrices(&dir.join(ACTIONS), &chunks)?;
    write_matrices(&dir.join(EXECUTED), &[&rec.executed])?;
    write_json(
        &dir.join(MANIFEST),
        &EpisodeManifest {
            seed: rec.seed,
            steps: rec.executed.rows(),
            horizon: chunks.first().map_or(0, |c| c.rows()),
            action_dim: rec.executed.cols(),
            feature_dim: src.feature_dim(),
            success: rec.success,
            states: rec.states.clone(),
            initial_pose: rec.scene.initial_pose,
            data_hash: cfg.data_hash(),
        },
    )
}

pub fn read_episode(dir: &Path) -> Result<EpisodeRecord> {
    let m: EpisodeManifest = read_json(&dir.join(MANIFEST))?;
    let src_path = dir.join(SOURCES);
    let (points, feats) = read_cloud_text(&src_path)?;
    if feats.cols() != 2 * m.feature_dim {
        return Err(Error::format(&src_path, "feature columns do not match the manifest"));
    }
    let d = m.feature_dim;
    let a = Matrix::from_fn(points.len(), d, |i, j| feats[(i, j)]);
    let b = Matrix::from_fn(points.len(), d, |i, j| feats[(i, d + j)]);
    let sources = LiftedSources::new(points, a, b).map_err(|e| Error::format(&src_path, e.to_string()))?;
    let part_path = dir.join(PARTITION);
    let pf = PartitionFile::read(&part_path)?;
    let fused = sources.fused_field(crate::bench::observe::PARTITION_FUSION, 0)?;
    let partition = LocalFieldSet::from_assignments(&fused, pf.k, &pf.assignments)
        .map_err(|e| Error::format(&part_path, e.to_string()))?;
    let chunks = read_matrices(&dir.join(ACTIONS))?;
    let executed = read_matrices(&dir.join(EXECUTED))?
        .pop()
        .ok_or_else(|| Error::format(dir.join(EXECUTED), "no executed actions"))?;
    if chunks.len() != m.steps || executed.rows() != m.steps || m.states.len() != m.steps + 1 {
        return Err(Error::format(dir.join(MANIFEST), "episode lengths are inconsistent"));
    }
    Ok(EpisodeRecord {
        seed: m.seed,
        states: m.states,
        chunks,
        executed,
        success: m.success,
        scene: EpisodeScene {
            sources,
            partition,
            initial_pose: m.initial_pose,
        },
    })
}

/// Collects `n_episodes` successful expert demonstrations under `out`.
/// Expert failures and unsuccessful runs are discarded.
pub fn generate_dataset(cfg: &BenchConfig, n_episodes: usize, seed: u64, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    if n_episodes == 0 {
        return Err(Error::invalid("n_episodes must be positive"));
    }
    let mut kept = Vec::with_capacity(n_episodes);
    let mut attempts = 0usize;
    while kept.len() < n_episodes {
        if attempts > 10 * n_episodes + 100 {
            return Err(Error::ExpertFailure(format!(
                "only {} of {n_episodes} demonstrations succeeded after {attempts} attempts",
                kept.len()
            )));
        }
        let batch = n_episodes - kept.len();
        let runs: Vec<Result<EpisodeRecord>> = (attempts..attempts + batch)
            .into_par_iter()
            .map(|i| run_expert_episode(cfg, derive_seed(seed, DEMO_STREAM, i as u64)))
            .collect();
        attempts += batch;
        for r in runs {
            match r {
                Ok(rec) if rec.success => kept.push(rec),
                Ok(_) | Err(Error::ExpertFailure(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let dirs: Vec<String> = (0..n_episodes).map(episode_dir_name).collect();
    kept.par_iter()
        .zip(&dirs)
        .try_for_each(|(rec, name)| write_episode(&out.join(name), rec, cfg))?;
    let manifest = DatasetManifest {
        task: cfg.task.name.clone(),
        episodes: n_episodes,
        seed,
        attempts,
        data_hash: cfg.data_hash(),
        episode_dirs: dirs,
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Reads every episode listed in the dataset manifest; when `cfg` is given
/// its data hash must match.
pub fn read_dataset(dir: &Path, cfg: Option<&BenchConfig>) -> Result<(DatasetManifest, Vec<EpisodeRecord>)> {
    let manifest: DatasetManifest = read_json(&dir.join(MANIFEST))?;
    if let Some(c) = cfg {
        if c.data_hash() != manifest.data_hash {
            return Err(Error::Config(format!(
                "dataset at {} was generated with a different task/observation config",
                dir.display()
            )));
        }
    }
    let episodes = manifest
        .episode_dirs
        .iter()
        .map(|d| read_episode(&dir.join(d)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, episodes))
}

/// `(observation, expert chunk)` for every timestep of every episode.
pub fn training_pairs(records: &[EpisodeRecord]) -> Result<Vec<(Observation, Matrix)>> {
    let mut out = Vec::new();
    for rec in records {
        for (s, chunk) in rec.states.iter().zip(&rec.chunks) {
            out.push((rec.scene.observe(s)?, chunk.clone()));
        }
    }
    Ok(out)
}

pub fn episode_paths(dir: &Path, manifest: &DatasetManifest) -> Vec<PathBuf> {
    manifest.episode_dirs.iter().map(|d| dir.join(d)).collect()
}
