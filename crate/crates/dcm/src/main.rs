//! `dcm` command-line runner.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dcm::config::ExperimentConfig;
use dcm::error::Result;
use dcm::plot::{emit_plot, PlotKind};
use dcm::train::{
    arm_means, run_ablation_interval, run_ablation_stage, run_ablation_strategy, run_sweep_ratio,
    run_train, ArmSummary,
};

#[derive(Parser)]
#[command(name = "dcm", about = "Dynamic connection masking experiments", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Config file (flat `key = value` lines, `#` comments).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (falls back to out_dir, then $DCM_OUT).
    #[arg(long)]
    out: Option<String>,
    /// Individual config overrides, e.g. --set epochs=30.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Clone)]
struct SuiteArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Seeds to run each arm under.
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
    seeds: Vec<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// One training run.
    Train(RunArgs),
    /// Accuracy over a grid of masking ratios.
    SweepRatio {
        #[command(flatten)]
        suite: SuiteArgs,
        /// Masking ratios to sweep.
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.3, 0.5, 0.6, 0.8])]
        ratios: Vec<f64>,
    },
    /// Compare masking strategies against the unmasked baseline.
    AblateStrategy(SuiteArgs),
    /// Compare masking stages (none / train-only / train-and-test).
    AblateStage(SuiteArgs),
    /// Compare masking intervals (per-iteration / per-epoch).
    AblateInterval(SuiteArgs),
    /// Render an SVG from metrics CSVs or a mask export.
    Plot {
        /// accuracy_curve | grad_err_curve | ratio_sweep | mask_density
        #[arg(long)]
        kind: String,
        /// Input files.
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// Output SVG path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn build_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::parse_file(path)?,
        None => ExperimentConfig::default(),
    };
    for kv in &args.set {
        let (key, value) = kv.split_once('=').ok_or_else(|| {
            dcm::DcmError::Config(format!("--set expects KEY=VALUE, got `{kv}`"))
        })?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if cfg.out_dir.is_empty() {
        cfg.out_dir = std::env::var("DCM_OUT").unwrap_or_else(|_| "dcm-out".to_string());
    }
    Ok(cfg)
}

fn print_summaries(summaries: &[ArmSummary]) {
    println!("arm                 seed  best     last-10");
    for s in summaries {
        println!(
            "{:<20}{:<6}{:<9.4}{:.4}",
            s.arm, s.seed, s.best_acc, s.last10_acc
        );
    }
    println!("---");
    for (arm, mean) in arm_means(summaries) {
        println!("{arm:<20}mean last-10 accuracy {mean:.4}");
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(args) => {
            let cfg = build_config(&args)?;
            let metrics = run_train(&cfg)?;
            println!(
                "run complete: {} epochs, final test accuracy {:.4}, best {:.4}, last-10 mean {:.4}",
                metrics.epochs.len(),
                metrics.final_test_acc(),
                metrics.best_test_acc(),
                metrics.last10_test_acc()
            );
            println!("outputs in {}", cfg.out_dir);
        }
        Cmd::SweepRatio { suite, ratios } => {
            let cfg = build_config(&suite.run)?;
            let out = PathBuf::from(&cfg.out_dir);
            let summaries = run_sweep_ratio(&cfg, &ratios, &suite.seeds, &out)?;
            print_summaries(&summaries);
        }
        Cmd::AblateStrategy(suite) => {
            let cfg = build_config(&suite.run)?;
            let out = PathBuf::from(&cfg.out_dir);
            let summaries = run_ablation_strategy(&cfg, &suite.seeds, &out)?;
            print_summaries(&summaries);
        }
        Cmd::AblateStage(suite) => {
            let cfg = build_config(&suite.run)?;
            let out = PathBuf::from(&cfg.out_dir);
            let summaries = run_ablation_stage(&cfg, &suite.seeds, &out)?;
            print_summaries(&summaries);
        }
        Cmd::AblateInterval(suite) => {
            let cfg = build_config(&suite.run)?;
            let out = PathBuf::from(&cfg.out_dir);
            let summaries = run_ablation_interval(&cfg, &suite.seeds, &out)?;
            print_summaries(&summaries);
        }
        Cmd::Plot { kind, inputs, out } => {
            let kind: PlotKind = kind.parse()?;
            emit_plot(kind, &inputs, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
