use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use mta_core::config::RunConfig;
use mta_core::harness::{self, RunLog};
use mta_core::model::Model;
use mta_core::Error;

#[derive(Parser)]
#[command(name = "mta", version, about = "Multi-granular trajectory alignment distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed
    #[arg(long, env = "MTA_SEED")]
    seed: Option<u64>,
    /// Output directory (or file, for export-hidden); overrides paths.out_dir
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Heldout,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the teacher on the configured corpus
    TrainTeacher(Common),
    /// Distil the teacher into a fresh student
    Distill {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint; defaults to paths.teacher_checkpoint
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Evaluate a student checkpoint on the held-out split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Held-out DSA at every student layer, as CSV
    ProbeDsa {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Dump per-layer hidden states of a checkpoint
    ExportHidden {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "heldout")]
        split: Split,
    },
    /// Print (or write with --out) the default configuration
    GenConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.paths.out_dir = out.clone();
    }
    Ok(cfg)
}

fn teacher_path(cfg: &RunConfig, flag: &Option<PathBuf>) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.paths.teacher_checkpoint.clone())
        .ok_or_else(|| Error::Config {
            path: "paths.teacher_checkpoint".into(),
            msg: "no teacher checkpoint given".into(),
        })
        .map_err(Into::into)
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenConfig { out } => {
            let text = RunConfig::default().to_toml();
            match out {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
        }
        Command::TrainTeacher(c) => {
            let cfg = load_config(&c)?;
            let data = harness::load_dataset(&cfg)?;
            let dir = &cfg.paths.out_dir;
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
            let mut log = RunLog::create(&dir.join("run.log"))?;
            let (model, metrics) = harness::train_teacher(&cfg, &data, &mut log)?;
            model.save(&dir.join("teacher.ckpt"))?;
            harness::save_metrics(&dir.join("metrics.json"), &metrics)?;
            info!("teacher written to {}", dir.join("teacher.ckpt").display());
        }
        Command::Distill { common, teacher } => {
            let cfg = load_config(&common)?;
            let teacher = load_model(&teacher_path(&cfg, &teacher)?)?;
            let data = harness::load_dataset(&cfg)?;
            let out = harness::distill(&cfg, &teacher, &data, Some(&cfg.paths.out_dir))?;
            println!("{}", serde_json::to_string_pretty(&out.metrics)?);
        }
        Command::Eval {
            common,
            student,
            teacher,
        } => {
            let cfg = load_config(&common)?;
            let teacher = load_model(&teacher_path(&cfg, &teacher)?)?;
            let student = load_model(&student)?;
            let data = harness::load_dataset(&cfg)?;
            let metrics = harness::evaluate(&cfg, &student, &teacher, &data)?;
            if let Some(dir) = &common.out {
                std::fs::create_dir_all(dir)?;
                harness::save_metrics(&dir.join("eval.json"), &metrics)?;
            }
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::ProbeDsa {
            common,
            student,
            teacher,
        } => {
            let cfg = load_config(&common)?;
            let teacher = load_model(&teacher_path(&cfg, &teacher)?)?;
            let student = load_model(&student)?;
            let data = harness::load_dataset(&cfg)?;
            let csv = harness::probe_csv(&harness::probe_dsa(&cfg, &student, &teacher, &data)?);
            if let Some(dir) = &common.out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("probe_dsa.csv"), &csv)?;
            }
            print!("{csv}");
        }
        Command::ExportHidden {
            common,
            checkpoint,
            split,
        } => {
            let cfg = load_config(&common)?;
            let model = load_model(&checkpoint)?;
            let data = harness::load_dataset(&cfg)?;
            let samples = match split {
                Split::Train => &data.train,
                Split::Heldout => &data.heldout,
            };
            let out = common.out.unwrap_or_else(|| cfg.paths.out_dir.join("hidden.mtad"));
            harness::export_hidden(&model, samples)?.write(&out)?;
            info!("wrote {} records to {}", samples.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
