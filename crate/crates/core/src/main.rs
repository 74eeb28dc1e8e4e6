use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use partfield::bench::ablation::ablation_grid;
use partfield::bench::eval::evaluate_checkpoints;
use partfield::bench::{
    evaluate, generate_dataset, read_dataset, run_ablation, training_pairs, visualize_field, BenchConfig,
    ExpertPolicy, RandomPolicy,
};
use partfield::policy::{save_checkpoint, train, MetricsRecord, Policy};
use partfield::{Error, Result};

#[derive(Parser)]
#[command(name = "partfield", version, about = "Part-aware diffusion policy benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON config; absent fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Expert,
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Generate expert demonstrations.
    GenDemos {
        #[command(flatten)]
        common: Common,
        /// Overrides dataset.episodes.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train a policy on a demonstration directory and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// JSON-lines metrics file (default: `<out>.metrics.jsonl`).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Closed-loop evaluation; writes an EvalReport JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        /// One checkpoint, or one per evaluation seed.
        #[arg(long, required_unless_present = "baseline")]
        checkpoint: Vec<PathBuf>,
        #[arg(long, value_enum, conflicts_with = "checkpoint")]
        baseline: Option<Baseline>,
    },
    /// Train and evaluate the toggle grid; writes JSON and text tables.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Existing demonstrations; generated under `<out>/data` when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Colorize a field file by its principal feature components.
    VizField {
        #[arg(long)]
        field: PathBuf,
        /// Output prefix; `.txt` and `.png` are appended.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<BenchConfig> {
    match path {
        Some(p) => BenchConfig::load(p),
        None => Ok(BenchConfig::default()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

struct JsonLines {
    path: PathBuf,
    w: BufWriter<File>,
}

impl JsonLines {
    fn create(path: &Path) -> Result<Self> {
        let io = |e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            w: BufWriter::new(File::create(path).map_err(io)?),
        })
    }

    fn write(&mut self, value: &serde_json::Value) -> Result<()> {
        writeln!(self.w, "{value}")
            .and_then(|()| self.w.flush())
            .map_err(|e| Error::Io {
                path: self.path.clone(),
                source: e,
            })
    }
}

fn record_json(m: &MetricsRecord) -> serde_json::Value {
    serde_json::to_value(m).expect("metrics serialize")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenDemos { common, episodes } => {
            let cfg = load_config(common.config.as_deref())?;
            let n = episodes.unwrap_or(cfg.dataset.episodes);
            let m = generate_dataset(&cfg, n, common.seed.unwrap_or(0), &common.out)?;
            println!("wrote {} episodes ({} attempts) to {}", m.episodes, m.attempts, common.out.display());
        }
        Command::Train { common, data, metrics } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
                cfg.policy.init_seed = s;
            }
            let (_, episodes) = read_dataset(&data, Some(&cfg))?;
            let pairs = training_pairs(&episodes)?;
            let mut policy = Policy::new(cfg.policy.clone())?;
            let metrics = metrics.unwrap_or_else(|| common.out.with_extension("metrics.jsonl"));
            let mut log = JsonLines::create(&metrics)?;
            let report = train(&mut policy, &pairs, &cfg.train, |m| log.write(&record_json(m)))?;
            if let Some(dir) = common.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::Io {
                    path: dir.to_path_buf(),
                    source: e,
                })?;
            }
            save_checkpoint(&policy, &common.out)?;
            println!("final loss {:.5}; checkpoint {}", report.final_loss, common.out.display());
        }
        Command::Eval {
            common,
            checkpoint,
            baseline,
        } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.eval.seeds = vec![s];
            }
            let n = cfg.eval.episodes_per_seed;
            let seeds = cfg.eval.seeds.clone();
            let report = match baseline {
                Some(Baseline::Expert) => evaluate(&ExpertPolicy { config: cfg.clone() }, &cfg, n, &seeds)?,
                Some(Baseline::Random) => {
                    let p = RandomPolicy {
                        horizon: cfg.policy.denoiser.horizon,
                        max_step: cfg.task.max_step,
                    };
                    evaluate(&p, &cfg, n, &seeds)?
                }
                None => {
                    if checkpoint.len() != 1 && checkpoint.len() != seeds.len() {
                        return Err(Error::Config(format!(
                            "{} checkpoints for {} seeds",
                            checkpoint.len(),
                            seeds.len()
                        )));
                    }
                    let paths: Vec<&Path> = checkpoint.iter().map(PathBuf::as_path).collect();
                    evaluate_checkpoints(&paths, &cfg, n, &seeds)?
                }
            };
            write_text(&common.out, &serde_json::to_string_pretty(&report).expect("report serializes"))?;
            println!("success {:.1}% ± {:.1}%", 100.0 * report.mean, 100.0 * report.std);
        }
        Command::Ablate { common, data } => {
            let cfg = load_config(common.config.as_deref())?;
            let data = match data {
                Some(d) => d,
                None => {
                    let d = common.out.join("data");
                    generate_dataset(&cfg, cfg.dataset.episodes, common.seed.unwrap_or(0), &d)?;
                    d
                }
            };
            let (_, episodes) = read_dataset(&data, Some(&cfg))?;
            let pairs = training_pairs(&episodes)?;
            let mut log = JsonLines::create(&common.out.join("metrics.jsonl"))?;
            let table = run_ablation(&cfg, &ablation_grid(), &pairs, |row, seed, m| {
                let mut v = record_json(m);
                v["config"] = row.into();
                v["seed"] = seed.into();
                log.write(&v)
            })?;
            write_text(&common.out.join("ablation.json"), &table.to_json())?;
            let text = table.to_text();
            write_text(&common.out.join("ablation.txt"), &text)?;
            print!("{text}");
        }
        Command::VizField { field, out } => {
            let v = visualize_field(&field, &out)?;
            println!("wrote {} and {}", v.cloud_path.display(), v.image_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                e if e.is_io() => 3,
                _ => 1,
            })
        }
    }
}
