//! `ledit` - dual-branch latent editing at desk scale.
//!
//! Subcommands: train the toy models, render a benchmark, run single edits,
//! sweep the benchmark (optionally across gateway strategies), and profile
//! gateway memory behaviour.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ledit_core::denoiser::train::DenoiserTrainConfig;
use ledit_core::denoiser::ToyDenoiserConfig;
use ledit_core::embedder::{EmbedderTrainConfig, ToyEmbedderConfig};
use ledit_core::error::Error;
use ledit_core::gateway::GatewayStrategy;
use ledit_core::pipeline::bench::{
    benchmark_run, format_table, read_benchmark, write_benchmark,
};
use ledit_core::pipeline::profile::{format_profile, profile_run};
use ledit_core::pipeline::{
    edit_run, parse_strategy, parse_task, train_denoiser_to, train_embedder_to, EditRequest,
    RunConfig, Workbench,
};
use ledit_core::Real;

#[derive(Parser)]
#[command(name = "ledit", version, about = "Dual-branch latent diffusion editing")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Run config file (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Denoiser checkpoint path (overrides the config).
    #[arg(long)]
    denoiser: Option<PathBuf>,
    /// Embedder checkpoint path (overrides the config).
    #[arg(long)]
    embedder: Option<PathBuf>,
    /// Run seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_toml_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(p) = &self.denoiser {
            cfg.backend.checkpoint = p.clone();
        }
        if let Some(p) = &self.embedder {
            cfg.embedder.checkpoint = p.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a toy model and write its checkpoint.
    Train {
        #[command(subcommand)]
        model: TrainCmd,
    },
    /// Generate the edit-triplet benchmark (images + manifest).
    MakeBench {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        n_per_task: usize,
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
    /// Edit one image toward a target caption.
    Edit {
        /// Source image (PPM).
        #[arg(long)]
        image: PathBuf,
        /// Target caption over the closed vocabulary.
        #[arg(long)]
        target: String,
        /// Share mode: structure | nonrigid.
        #[arg(long)]
        mode: Option<String>,
        /// Task preset: replacement | attribute | style | pose | shape.
        #[arg(long)]
        task: Option<String>,
        /// Reconstruction strength.
        #[arg(long)]
        lambda: Option<f64>,
        /// Optimization loops N.
        #[arg(long)]
        loops: Option<usize>,
        /// Gateways per loop n.
        #[arg(long)]
        gateways: Option<usize>,
        /// Gateway strategy: random | former-half | latter-half | stratified-intervals.
        #[arg(long)]
        strategy: Option<String>,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Run the benchmark and print per-category metric tables.
    Bench {
        /// Benchmark manifest (from make-bench).
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated gateway strategies to sweep.
        #[arg(long)]
        strategies: Option<String>,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Profile gateway memory behaviour for a list of gateway counts.
    Profile {
        /// Comma-separated gateway counts.
        #[arg(long, default_value = "1,3,5,10")]
        gateway_counts: String,
        #[command(flatten)]
        common: ConfigArgs,
    },
}

#[derive(Subcommand)]
enum TrainCmd {
    Denoiser {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1500)]
        steps: usize,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
        #[arg(long, default_value_t = 2e-3)]
        learning_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run config supplying the noise schedule (defaults when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    Embedder {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 600)]
        steps: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 3e-3)]
        learning_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) => 2,
        Error::Config(_) | Error::Archive(_) | Error::ShapeMismatch { .. } => 3,
        _ => 4,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::Train { model } => match model {
            TrainCmd::Denoiser {
                out,
                steps,
                batch_size,
                learning_rate,
                seed,
                config,
            } => {
                let cfg = match &config {
                    Some(path) => RunConfig::from_toml_file(path)?,
                    None => RunConfig::default(),
                };
                let train_cfg = DenoiserTrainConfig {
                    steps,
                    batch_size,
                    learning_rate,
                    seed,
                    ..Default::default()
                };
                let report = train_denoiser_to::<Real>(
                    &out,
                    &ToyDenoiserConfig::default(),
                    &cfg.schedule,
                    &train_cfg,
                )?;
                let curve_path = out.with_extension("curve.json");
                std::fs::write(&curve_path, serde_json::to_string(&report).unwrap())?;
                println!(
                    "denoiser trained: loss {:.4} -> {:.4} over {} steps; checkpoint {}",
                    report.initial_loss,
                    report.final_loss,
                    steps,
                    out.display()
                );
            }
            TrainCmd::Embedder {
                out,
                steps,
                batch_size,
                learning_rate,
                seed,
            } => {
                let train_cfg = EmbedderTrainConfig {
                    steps,
                    batch_size,
                    learning_rate,
                    seed,
                };
                let report =
                    train_embedder_to::<Real>(&out, &ToyEmbedderConfig::default(), &train_cfg)?;
                let curve_path = out.with_extension("curve.json");
                std::fs::write(&curve_path, serde_json::to_string(&report).unwrap())?;
                println!(
                    "embedder trained: holdout retrieval {:.1}%; checkpoint {}",
                    report.holdout_retrieval_accuracy * 100.0,
                    out.display()
                );
            }
        },
        Cmd::MakeBench { out, n_per_task, seed } => {
            let manifest = write_benchmark(&out, n_per_task, seed)?;
            println!("benchmark written: {}", manifest.display());
        }
        Cmd::Edit {
            image,
            target,
            mode,
            task,
            lambda,
            loops,
            gateways,
            strategy,
            common,
        } => {
            let mut cfg = common.load()?;
            if let Some(m) = &mode {
                ledit_core::pipeline::parse_mode(m)?;
                cfg.share.mode = m.clone();
            }
            if let Some(l) = lambda {
                cfg.optimize.lambda = l;
            }
            if let Some(n) = loops {
                cfg.optimize.loops = n;
            }
            if let Some(g) = gateways {
                cfg.optimize.gateways_per_loop = g;
            }
            if let Some(s) = &strategy {
                cfg.optimize.strategy = parse_strategy(s)?;
            }
            let req = EditRequest {
                image_path: image,
                target_caption: target,
                task: task.as_deref().map(parse_task).transpose()?,
            };
            let workbench = Workbench::<Real>::load(&cfg)?;
            let manifest = edit_run(&cfg, &req, &workbench)?;
            println!(
                "edit complete: alignment {:.2}, self-sim {:.4}, latent digest {}",
                manifest.metrics.alignment_score,
                manifest.metrics.self_sim_distance,
                manifest.final_latent_digest
            );
            println!("manifest: {}", cfg.out_dir.join("manifest.json").display());
        }
        Cmd::Bench {
            manifest,
            strategies,
            common,
        } => {
            let cfg = common.load()?;
            let records = read_benchmark(&manifest)?;
            let strategy_list: Vec<GatewayStrategy> = match strategies {
                Some(text) => text
                    .split(',')
                    .map(|s| parse_strategy(s.trim()))
                    .collect::<Result<_, _>>()?,
                None => vec![cfg.optimize.strategy],
            };
            let workbench = Workbench::<Real>::load(&cfg)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            for strategy in strategy_list {
                let report = benchmark_run(&cfg, &records, strategy, &workbench)?;
                print!("{}", format_table(&report));
                let path = cfg
                    .out_dir
                    .join(format!("bench_{}.json", strategy.label()));
                std::fs::write(&path, serde_json::to_string_pretty(&report).unwrap())?;
                println!("report: {}\n", path.display());
            }
        }
        Cmd::Profile {
            gateway_counts,
            common,
        } => {
            let cfg = common.load()?;
            let counts: Vec<usize> = gateway_counts
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::invalid(format!("bad gateway count '{s}'")))
                })
                .collect::<Result<_, _>>()?;
            let workbench = Workbench::<Real>::load(&cfg)?;
            let rows = profile_run(&cfg, &counts, &workbench)?;
            print!("{}", format_profile(&rows));
            std::fs::create_dir_all(&cfg.out_dir)?;
            let path = cfg.out_dir.join("profile.json");
            std::fs::write(&path, serde_json::to_string_pretty(&rows).unwrap())?;
            println!("report: {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
