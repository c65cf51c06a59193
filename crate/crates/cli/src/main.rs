//! Experiment CLI: one binary, one subcommand per experiment kind.
//!
//! Exit codes: 0 success, 1 config error, 2 runtime failure, 3 a
//! `--require-pass` verification check failed.

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use compflow::runner::{emit_plot_data, run_experiment, ExperimentKind, PlotView, RunConfig};
use compflow::CoreError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "compflow", version, about = "Compositional flow generation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML config file; defaults apply for every omitted field.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override any config field by dotted path, e.g.
    /// `--set grpo.iterations=50` or `--set schedule.eta_min=0.0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Exit 3 unless the run's verification verdict passes.
    #[arg(long)]
    require_pass: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a velocity field on a synthetic domain.
    Pretrain(RunArgs),
    /// GRPO fine-tuning of a (pre)trained field on the toy reward.
    RlFinetune(RunArgs),
    /// Weight function, allocation optimum, and schedule comparison of the
    /// shipped covariance model.
    AnalyzeSchedule(RunArgs),
    /// Paired chain-vs-monolithic coverage on the hard domain.
    ChainEval(RunArgs),
    /// Generate the benchmark dataset splits.
    Benchgen(RunArgs),
    /// Evaluate accuracy of samples against dataset records.
    Judge(RunArgs),
    /// Emit plot data from a completed run directory.
    EmitPlots {
        run_dir: PathBuf,
        /// One of: reward-curve, diversity, weight-function,
        /// schedule-comparison.
        #[arg(long)]
        view: String,
    },
}

fn is_config_error(e: &CoreError) -> bool {
    matches!(
        e,
        CoreError::InvalidConfig(_)
            | CoreError::InvalidSchedule(_)
            | CoreError::Parse { .. }
            | CoreError::InvalidTree(_)
    )
}

fn apply_set(value: &mut toml::Value, key: &str, raw: &str) -> anyhow::Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, init) = parts
        .split_last()
        .with_context(|| format!("--set {key}: empty key"))?;
    let mut cursor = value;
    for part in init {
        let table = cursor
            .as_table_mut()
            .with_context(|| format!("{key}: {part} is not a table"))?;
        cursor = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let parsed: toml::Value = raw
        .parse::<i64>()
        .map(toml::Value::Integer)
        .or_else(|_| raw.parse::<f64>().map(toml::Value::Float))
        .or_else(|_| raw.parse::<bool>().map(toml::Value::Boolean))
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
    cursor
        .as_table_mut()
        .with_context(|| format!("{key}: parent is not a table"))?
        .insert(last.to_string(), parsed);
    Ok(())
}

fn load_config(kind: ExperimentKind, args: &RunArgs) -> anyhow::Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    config.kind = kind;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(dir) = &args.out_dir {
        config.out_dir = dir.clone();
    }
    if !args.sets.is_empty() {
        let mut value = toml::Value::try_from(&config).context("re-serializing config")?;
        for set in &args.sets {
            let (key, raw) = set
                .split_once('=')
                .with_context(|| format!("--set {set}: expected KEY=VALUE"))?;
            apply_set(&mut value, key.trim(), raw.trim())?;
        }
        config = value.try_into().context("applying --set overrides")?;
        config.kind = kind;
    }
    Ok(config)
}

/// Post-run verification verdict per experiment kind, for `--require-pass`.
fn verify_run(kind: ExperimentKind, dir: &std::path::Path) -> anyhow::Result<bool> {
    let read_json = |name: &str| -> anyhow::Result<serde_json::Value> {
        let text = std::fs::read_to_string(dir.join(name))?;
        Ok(serde_json::from_str(&text)?)
    };
    Ok(match kind {
        ExperimentKind::Pretrain => {
            let s = read_json("summary.json")?;
            s["holdout_loss"].as_f64().is_some_and(|l| l.is_finite())
        }
        ExperimentKind::RlFinetune => {
            let s = read_json("summary.json")?;
            let init = s["initial_mean_reward"].as_f64().unwrap_or(f64::NAN);
            let fin = s["final_mean_reward"].as_f64().unwrap_or(f64::NAN);
            fin >= 1.5 * init
        }
        ExperimentKind::AnalyzeSchedule => {
            let s = read_json("optimality_report.json")?;
            s["report"]["status"] == serde_json::json!("Holds")
        }
        ExperimentKind::ChainEval => {
            let s = read_json("chain_eval.json")?;
            let frac = |cov: &serde_json::Value, key: &str| -> f64 {
                let pair = &cov[key];
                let num = pair[0].as_f64().unwrap_or(0.0);
                let den = pair[1].as_f64().unwrap_or(0.0);
                if den == 0.0 {
                    1.0
                } else {
                    num / den
                }
            };
            let chain = &s["chain"];
            let mono = &s["monolithic"];
            frac(chain, "exist") >= frac(mono, "exist")
                && frac(chain, "attribute") > frac(mono, "attribute")
                && frac(chain, "relationship") >= frac(mono, "relationship")
        }
        ExperimentKind::Benchgen => {
            let s = read_json("summary.json")?;
            s["duplicate_rate_train"].as_f64().unwrap_or(1.0) < 0.01
                && s["duplicate_rate_test"].as_f64().unwrap_or(1.0) < 0.01
        }
        ExperimentKind::Judge => {
            let s = read_json("accuracy_report.json")?;
            s["skipped"].as_array().is_some_and(|a| a.is_empty())
        }
    })
}

fn run(kind: ExperimentKind, args: &RunArgs) -> ExitCode {
    let config = match load_config(kind, args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e:#}");
            return ExitCode::from(1);
        }
    };
    if let Err(e) = config.validate() {
        eprintln!("config error: {e}");
        return ExitCode::from(1);
    }
    let dir = match run_experiment(&config) {
        Ok(dir) => dir,
        Err(e) => {
            let code = if is_config_error(&e) { 1 } else { 2 };
            eprintln!("run failed: {e}");
            return ExitCode::from(code);
        }
    };
    println!("{}", dir.display());
    if args.require_pass {
        match verify_run(kind, &dir) {
            Ok(true) => {}
            Ok(false) => {
                eprintln!("verification check failed for {}", dir.display());
                return ExitCode::from(3);
            }
            Err(e) => {
                eprintln!("verification check unreadable: {e:#}");
                return ExitCode::from(2);
            }
        }
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Pretrain(args) => run(ExperimentKind::Pretrain, &args),
        Command::RlFinetune(args) => run(ExperimentKind::RlFinetune, &args),
        Command::AnalyzeSchedule(args) => run(ExperimentKind::AnalyzeSchedule, &args),
        Command::ChainEval(args) => run(ExperimentKind::ChainEval, &args),
        Command::Benchgen(args) => run(ExperimentKind::Benchgen, &args),
        Command::Judge(args) => run(ExperimentKind::Judge, &args),
        Command::EmitPlots { run_dir, view } => {
            let view: PlotView = match view.parse() {
                Ok(v) => v,
                Err(e) => {
                    eprintln!("config error: {e}");
                    return ExitCode::from(1);
                }
            };
            match emit_plot_data(&run_dir, view) {
                Ok(path) => {
                    println!("{}", path.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    let code = if is_config_error(&e) { 1 } else { 2 };
                    eprintln!("emit-plots failed: {e}");
                    ExitCode::from(code)
                }
            }
        }
    }
}
