use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pvgeo::config::RunConfig;
use pvgeo::pipeline::{cmd_eval, cmd_inspect, cmd_run, cmd_synth, with_threads};
use pvgeo::synth::ScenarioConfig;

#[derive(Parser)]
#[command(name = "pvgeo", version, about = "Georeference PV modules from aerial infrared surveys")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override any setting, e.g. `--set sfm.gps_sigma_m=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline.
    Run {
        #[command(flatten)]
        common: Common,
        /// Import camera poses (JSONL) instead of running SfM.
        #[arg(long)]
        poses: Option<PathBuf>,
    },
    /// Generate a synthetic dataset from a scenario file.
    Synth {
        /// Scenario (TOML); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a finished run against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Dump the reconstruction (keyframes, poses, scene points).
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        poses: Option<PathBuf>,
    },
}

fn load(common: &Common) -> pvgeo::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    for a in &common.overrides {
        cfg.set(a)?;
    }
    Ok(cfg)
}

fn print(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("reports serialize"));
}

fn execute(cli: Cli) -> pvgeo::Result<()> {
    match cli.command {
        Command::Run { common, poses } => {
            let cfg = load(&common)?;
            let mut report = with_threads(cfg.threads, || cmd_run(&cfg, poses.as_deref()))??;
            report.config.clear();
            print(&report);
        }
        Command::Synth { config, seed, out } => {
            let mut sc = match config {
                Some(p) => ScenarioConfig::load(&p)?,
                None => ScenarioConfig::default(),
            };
            if let Some(s) = seed {
                sc.seed = s;
            }
            let run = cmd_synth(&sc, &out)?;
            println!("{}", run.display());
        }
        Command::Eval { common, truth, labels } => {
            let cfg = load(&common)?;
            let truth = truth
                .or(cfg.input.truth.clone())
                .ok_or_else(|| pvgeo::Error::Config("eval needs --truth or input.truth".into()))?;
            let labels = labels.or(cfg.input.labels.clone());
            print(&cmd_eval(&cfg.out_dir, &truth, labels.as_deref())?);
        }
        Command::Inspect { common, poses } => {
            let cfg = load(&common)?;
            let dump = with_threads(cfg.threads, || cmd_inspect(&cfg, poses.as_deref()))??;
            eprintln!(
                "{} keyframes, {} registered, {} partials; written to {}",
                dump["keyframes"].as_array().map_or(0, Vec::len),
                dump["poses"].as_array().map_or(0, Vec::len),
                dump["partials"],
                cfg.out_dir.join("reconstruction.json").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
