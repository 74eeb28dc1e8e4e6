//! Toggle ablation: trains one policy per (row, seed) on the same
//! demonstrations and evaluates it under that seed.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bench::eval::{evaluate_models, ChunkPolicy, EvalReport};
use crate::bench::BenchConfig;
use crate::condition::{Observation, Toggles};
use crate::error::Result;
use crate::linalg::Matrix;
use crate::policy::{train, MetricsRecord, Policy};

/// Global-only baseline, each toggle alone, then everything on.
pub fn ablation_grid() -> Vec<(String, Toggles)> {
    let only = |dense_semantic, global_pose_condition, part_refine| Toggles {
        dense_semantic,
        global_pose_condition,
        part_refine,
    };
    vec![
        ("global-only".into(), Toggles::NONE),
        ("+dense_semantic".into(), only(true, false, false)),
        ("+global_pose".into(), only(false, true, false)),
        ("+part_refine".into(), only(false, false, true)),
        ("full".into(), Toggles::ALL),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub toggles: Toggles,
    pub report: EvalReport,
    pub final_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<18} {:>5} {:>5} {:>5} {:>8} {:>7}\n", "config", "sem", "pose", "refine", "mean", "std");
        for r in &self.rows {
            let t = r.toggles;
            let flag = |b: bool| if b { "x" } else { "-" };
            let _ = writeln!(
                s,
                "{:<18} {:>5} {:>5} {:>5} {:>7.1}% {:>6.1}%",
                r.name,
                flag(t.dense_semantic),
                flag(t.global_pose_condition),
                flag(t.part_refine),
                100.0 * r.report.mean,
                100.0 * r.report.std
            );
        }
        s
    }
}

/// Trains and evaluates every grid row on `data`. `log` receives the row
/// name, the seed and each training record.
pub fn run_ablation(
    cfg: &BenchConfig,
    grid: &[(String, Toggles)],
    data: &[(Observation, Matrix)],
    mut log: impl FnMut(&str, u64, &MetricsRecord) -> Result<()>,
) -> Result<AblationTable> {
    cfg.validate()?;
    let seeds = &cfg.eval.seeds;
    let mut rows = Vec::with_capacity(grid.len());
    for (name, toggles) in grid {
        let row_cfg = cfg.with_toggles(*toggles);
        let mut models = Vec::with_capacity(seeds.len());
        let mut losses = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut pc = row_cfg.policy.clone();
            pc.init_seed = seed;
            let mut tc = row_cfg.train.clone();
            tc.seed = seed;
            let mut policy = Policy::new(pc)?;
            let rep = train(&mut policy, data, &tc, |m| log(name, seed, m))?;
            losses.push(rep.final_loss);
            models.push(policy);
        }
        let refs: Vec<&dyn ChunkPolicy> = models.iter().map(|m| m as &dyn ChunkPolicy).collect();
        let report = evaluate_models(&refs, &row_cfg, row_cfg.eval.episodes_per_seed, seeds)?;
        rows.push(AblationRow {
            name: name.clone(),
            toggles: *toggles,
            report,
            final_losses: losses,
        });
    }
    Ok(AblationTable { rows })
}
