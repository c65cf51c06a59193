//! Experiment orchestration: resolved configs, self-describing run
//! directories, metric logs, and plot-data emission.
//!
//! Every run directory contains the resolved config, a manifest with the
//! code version and seeds, and the experiment's metric files. With hermetic
//! backends, re-running the same config and seed reproduces every metric
//! file bitwise (directory names carry a timestamp; contents do not).

use crate::benchgen::{duplicate_rate, generate_dataset, read_records_jsonl, write_records_jsonl, BenchConfig};
use crate::chain::{run_chain_eval, ChainEvalConfig};
use crate::field::MlpVelocityField;
use crate::flow::{train_velocity_field, SyntheticDomain, TrainConfig};
use crate::grpo::{run_grpo, GrpoConfig, IterationRecord, TargetModeReward};
use crate::judge::{evaluate_accuracy, OracleJudge};
use crate::lyapunov::{
    monte_carlo_variance, optimize_allocation, propagate_lyapunov, verify_decreasing_optimality,
    AllocationFamily, LinearSdeModel,
};
use crate::reward::RewardWeights;
use crate::rng::derive_seed;
use crate::sampler::SamplerForm;
use crate::scene::{SceneConfig, SceneDomain};
use crate::schedule::{ScheduleKind, StochasticitySchedule};
use crate::{CoreError, Result};
use ndarray::Array1;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Pretrain,
    RlFinetune,
    AnalyzeSchedule,
    ChainEval,
    Benchgen,
    Judge,
}

impl ExperimentKind {
    fn dir_tag(&self) -> &'static str {
        match self {
            ExperimentKind::Pretrain => "pretrain",
            ExperimentKind::RlFinetune => "rl-finetune",
            ExperimentKind::AnalyzeSchedule => "analyze-schedule",
            ExperimentKind::ChainEval => "chain-eval",
            ExperimentKind::Benchgen => "benchgen",
            ExperimentKind::Judge => "judge",
        }
    }
}

/// Synthetic data domain selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DomainSpec {
    /// `modes` equal-weight Gaussians on a circle (d = 2).
    Ring { modes: usize, radius: f64, std: f64 },
    /// One isotropic Gaussian.
    Single { mean: Vec<f64>, std: f64 },
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec::Ring {
            modes: 8,
            radius: 2.0,
            std: 0.25,
        }
    }
}

impl DomainSpec {
    pub fn build(&self) -> Result<SyntheticDomain> {
        match self {
            DomainSpec::Ring { modes, radius, std } => {
                SyntheticDomain::ring(*modes, *radius, *std)
            }
            DomainSpec::Single { mean, std } => SyntheticDomain::single(mean.clone(), *std),
        }
    }
}

/// Schedule selection on the sampling horizon `t_max = 1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub eta_min: f64,
    pub eta_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::CosineDecay,
            eta_min: 0.1,
            eta_max: 1.0,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<StochasticitySchedule> {
        match self.kind {
            ScheduleKind::Constant => StochasticitySchedule::constant(self.eta_max, 1.0),
            ScheduleKind::LinearDecay => {
                StochasticitySchedule::linear_decay(self.eta_min, self.eta_max, 1.0)
            }
            ScheduleKind::CosineDecay => {
                StochasticitySchedule::cosine_decay(self.eta_min, self.eta_max, 1.0)
            }
            ScheduleKind::ReversedCosine => {
                StochasticitySchedule::reversed_cosine(self.eta_min, self.eta_max, 1.0)
            }
            ScheduleKind::PiecewiseConstant => Err(CoreError::InvalidConfig(
                "piecewise schedules are built programmatically".into(),
            )),
        }
    }
}

/// Full experiment configuration; every field has a documented default and
/// the whole struct round-trips through TOML.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub domain: DomainSpec,
    pub train: TrainConfig,
    pub schedule: ScheduleSpec,
    pub sampler_form: SamplerForm,
    pub grpo: GrpoConfig,
    pub reward_weights: RewardWeights,
    /// Target of the toy target-mode reward; defaults to the domain's first
    /// mode mean.
    pub reward_target: Option<Vec<f64>>,
    /// Checkpoint to fine-tune; when absent, rl-finetune pretrains first.
    pub pretrained_checkpoint: Option<PathBuf>,
    pub bench: BenchConfig,
    pub chain: ChainEvalConfig,
    pub scene: SceneConfig,
    /// analyze-schedule quadrature grid.
    pub lyapunov_grid: usize,
    /// analyze-schedule bin count for the allocation searches.
    pub allocation_k: usize,
    /// analyze-schedule stochasticity budget.
    pub budget: f64,
    /// Monte Carlo cross-check size for analyze-schedule.
    pub mc_particles: usize,
    pub mc_steps: usize,
    /// judge: dataset records file (JSONL).
    pub judge_dataset: Option<PathBuf>,
    /// judge: samples file (JSONL of {record_id, latent}).
    pub judge_samples: Option<PathBuf>,
    /// judge: with no samples file, judge the oracle's own targets
    /// (self-test; expects perfect accuracies).
    pub judge_self_test: bool,
    /// judge backend: "oracle" (hermetic) or "remote" (reads the endpoint
    /// from `COMPFLOW_REMOTE_ENDPOINT`).
    pub judge_backend: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Pretrain,
            seed: 0,
            out_dir: PathBuf::from("runs"),
            domain: DomainSpec::default(),
            train: TrainConfig::default(),
            schedule: ScheduleSpec::default(),
            sampler_form: SamplerForm::MarginalPreserving,
            grpo: GrpoConfig::default(),
            reward_weights: RewardWeights::default(),
            reward_target: None,
            pretrained_checkpoint: None,
            bench: BenchConfig::default(),
            chain: ChainEvalConfig::default(),
            scene: SceneConfig::default(),
            lyapunov_grid: 1024,
            allocation_k: 8,
            budget: 1.0,
            mc_particles: 20_000,
            mc_steps: 400,
            judge_dataset: None,
            judge_samples: None,
            judge_self_test: false,
            judge_backend: "oracle".into(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.grpo.validate()?;
        self.reward_weights.validate()?;
        let _ = self.domain.build()?;
        let _ = self.schedule.build()?;
        if self.lyapunov_grid < 16 {
            return Err(CoreError::InvalidConfig("lyapunov_grid < 16".into()));
        }
        if !(2..=16).contains(&self.allocation_k) {
            return Err(CoreError::InvalidConfig(format!(
                "allocation_k {} outside [2, 16]",
                self.allocation_k
            )));
        }
        if self.kind == ExperimentKind::Judge
            && self.judge_dataset.is_none()
            && !self.judge_self_test
        {
            return Err(CoreError::InvalidConfig(
                "judge requires judge_dataset (or judge_self_test)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub code_version: String,
    pub kind: ExperimentKind,
    pub seed: u64,
    pub created_unix_ms: u128,
}

/// `{record_id, latent}` line of a judge samples file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleLine {
    pub record_id: u64,
    pub latent: Vec<f64>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

fn write_csv(path: &Path, header: &str, rows: &[Vec<f64>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(header);
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_metrics_jsonl(path: &Path, records: &[IterationRecord]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    Ok(())
}

fn read_metrics_jsonl(path: &Path) -> Result<Vec<IterationRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for line in std::io::BufRead::lines(reader) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Run the configured experiment into a fresh timestamped directory.
/// Invalid configs fail before any directory is created; failures mid-run
/// leave a `FAILED` marker naming the stage.
pub fn run_experiment(config: &RunConfig) -> Result<PathBuf> {
    config.validate()?;
    let created = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let dir = config.out_dir.join(format!(
        "{}-seed{}-{}",
        config.kind.dir_tag(),
        config.seed,
        created
    ));
    std::fs::create_dir_all(&dir)?;
    let resolved = toml::to_string_pretty(config)
        .map_err(|e| CoreError::InvalidConfig(format!("config not serializable: {e}")))?;
    std::fs::write(dir.join("config.toml"), resolved)?;
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            kind: config.kind,
            seed: config.seed,
            created_unix_ms: created,
        },
    )?;
    let outcome = match config.kind {
        ExperimentKind::Pretrain => stage_pretrain(config, &dir),
        ExperimentKind::RlFinetune => stage_rl(config, &dir),
        ExperimentKind::AnalyzeSchedule => stage_analyze(config, &dir),
        ExperimentKind::ChainEval => stage_chain_eval(config, &dir),
        ExperimentKind::Benchgen => stage_benchgen(config, &dir),
        ExperimentKind::Judge => stage_judge(config, &dir),
    };
    if let Err(e) = outcome {
        let marker = format!("stage: {}\nerror: {e}\n", config.kind.dir_tag());
        let _ = std::fs::write(dir.join("FAILED"), marker);
        return Err(e);
    }
    Ok(dir)
}

fn stage_pretrain(config: &RunConfig, dir: &Path) -> Result<()> {
    let domain = config.domain.build()?;
    let mut train = config.train.clone();
    train.seed = derive_seed(config.seed, "pretrain");
    let outcome = train_velocity_field(&domain, &train)?;
    outcome.field.save(&dir.join("field.json"))?;
    let rows: Vec<Vec<f64>> = outcome
        .loss_log
        .iter()
        .map(|&(s, l)| vec![s as f64, l])
        .collect();
    write_csv(&dir.join("loss_log.csv"), "step,loss", &rows)?;
    write_json(
        &dir.join("summary.json"),
        &serde_json::json!({ "holdout_loss": outcome.holdout_loss }),
    )?;
    Ok(())
}

fn stage_rl(config: &RunConfig, dir: &Path) -> Result<()> {
    let domain = config.domain.build()?;
    let mut field = match &config.pretrained_checkpoint {
        Some(path) => MlpVelocityField::load(path)?,
        None => {
            let mut train = config.train.clone();
            train.seed = derive_seed(config.seed, "pretrain");
            train_velocity_field(&domain, &train)?.field
        }
    };
    let target = match &config.reward_target {
        Some(t) => Array1::from_vec(t.clone()),
        None => Array1::from_vec(domain.modes[0].mean.clone()),
    };
    let reward = TargetModeReward { target };
    let schedule = config.schedule.build()?;
    let records = run_grpo(
        &mut field,
        Array1::zeros(0).view(),
        &schedule,
        config.sampler_form,
        &reward,
        &config.grpo,
        derive_seed(config.seed, "rl"),
    )?;
    field.save(&dir.join("field.json"))?;
    write_metrics_jsonl(&dir.join("metrics.jsonl"), &records)?;
    let k = 10.min(records.len());
    let head: f64 = records.iter().take(k).map(|r| r.mean_reward).sum::<f64>() / k.max(1) as f64;
    let tail: f64 = records.iter().rev().take(k).map(|r| r.mean_reward).sum::<f64>() / k.max(1) as f64;
    write_json(
        &dir.join("summary.json"),
        &serde_json::json!({
            "initial_mean_reward": head,
            "final_mean_reward": tail,
            "iterations": records.len(),
        }),
    )?;
    Ok(())
}

fn stage_analyze(config: &RunConfig, dir: &Path) -> Result<()> {
    let model = LinearSdeModel::shipped_verification();
    let grid = config.lyapunov_grid;
    let (table, mono) = crate::lyapunov::weight_function(&model, grid)?;
    write_csv(
        &dir.join("weight_function.csv"),
        "s,w",
        &table.iter().map(|&(s, w)| vec![s, w]).collect::<Vec<_>>(),
    )?;

    let budget = config.budget;
    let t = model.horizon;
    let constant = StochasticitySchedule::constant((budget / t).sqrt(), t)?;
    let cosine = StochasticitySchedule::cosine_with_budget(0.0, budget, t)?;
    let reversed = StochasticitySchedule::reversed_cosine(0.0, cosine.eta_max, t)?;
    let (free_sched, free_trace) =
        optimize_allocation(&model, budget, config.allocation_k, AllocationFamily::FreeBins)?;
    let (_, mono_trace) = optimize_allocation(
        &model,
        budget,
        config.allocation_k,
        AllocationFamily::MonotoneDecreasingBins,
    )?;
    let (_, cos_best) =
        optimize_allocation(&model, budget, config.allocation_k, AllocationFamily::CosineFamily)?;

    let mut rows = Vec::new();
    let mut names = Vec::new();
    for (name, sched) in [
        ("constant", &constant),
        ("cosine-decay", &cosine),
        ("reversed-cosine", &reversed),
        ("free-bins-optimum", &free_sched),
    ] {
        let trace = propagate_lyapunov(&model, sched, grid)?.sigma0_trace;
        let (mc, se) = monte_carlo_variance(
            &model,
            sched,
            config.mc_particles,
            config.mc_steps,
            derive_seed(config.seed, name),
        )?;
        names.push(name);
        rows.push(vec![sched.budget(), trace, mc, se]);
    }
    let mut csv = String::from("schedule,budget,lyapunov_trace,mc_trace,mc_stderr\n");
    for (name, row) in names.iter().zip(&rows) {
        csv.push_str(&format!(
            "{name},{},{},{},{}\n",
            row[0], row[1], row[2], row[3]
        ));
    }
    std::fs::write(dir.join("schedule_comparison.csv"), csv)?;

    let report = verify_decreasing_optimality(&model, budget, config.allocation_k)?;
    write_json(
        &dir.join("optimality_report.json"),
        &serde_json::json!({
            "monotonicity": format!("{mono:?}"),
            "report": report,
            "free_bins_trace": free_trace,
            "monotone_bins_trace": mono_trace,
            "cosine_family_best_trace": cos_best,
        }),
    )?;
    Ok(())
}

fn stage_chain_eval(config: &RunConfig, dir: &Path) -> Result<()> {
    let mut chain_config = config.chain.clone();
    chain_config.seed = derive_seed(config.seed, "chain-eval");
    let report = run_chain_eval(&chain_config)?;
    write_json(&dir.join("chain_eval.json"), &report)?;
    let content = format!(
        "pipeline,exist,attribute,relationship\nchain,{},{},{}\nmonolithic,{},{},{}\n",
        report.chain.exist_frac(),
        report.chain.attribute_frac(),
        report.chain.relationship_frac(),
        report.monolithic.exist_frac(),
        report.monolithic.attribute_frac(),
        report.monolithic.relationship_frac(),
    );
    std::fs::write(dir.join("coverage.csv"), content)?;
    Ok(())
}

fn stage_benchgen(config: &RunConfig, dir: &Path) -> Result<()> {
    let mut bench = config.bench.clone();
    bench.seed = derive_seed(config.seed, "benchgen");
    let (train, test, manifest) = generate_dataset(&bench)?;
    {
        let f = std::fs::File::create(dir.join("train.jsonl"))?;
        write_records_jsonl(&train, std::io::BufWriter::new(f))?;
    }
    {
        let f = std::fs::File::create(dir.join("test.jsonl"))?;
        write_records_jsonl(&test, std::io::BufWriter::new(f))?;
    }
    write_json(&dir.join("dataset_manifest.json"), &manifest)?;
    let mean_subjects = |rs: &[crate::benchgen::DatasetRecord]| {
        rs.iter().map(|r| r.stats.subjects as f64).sum::<f64>() / rs.len().max(1) as f64
    };
    write_json(
        &dir.join("summary.json"),
        &serde_json::json!({
            "train_records": train.len(),
            "test_records": test.len(),
            "duplicate_rate_train": duplicate_rate(&train),
            "duplicate_rate_test": duplicate_rate(&test),
            "mean_subjects_train": mean_subjects(&train),
            "mean_approx_tokens_train":
                train.iter().map(|r| r.stats.approx_tokens).sum::<f64>() / train.len().max(1) as f64,
        }),
    )?;
    Ok(())
}

fn stage_judge(config: &RunConfig, dir: &Path) -> Result<()> {
    let records = match &config.judge_dataset {
        Some(path) => {
            let f = std::fs::File::open(path)?;
            read_records_jsonl(std::io::BufReader::new(f))?
        }
        None => {
            // self-test: a small generated set
            let bench = BenchConfig {
                train_size: 0,
                test_size: 16,
                subjects_min: config.chain.subjects_per_record,
                subjects_max: config.chain.subjects_per_record,
                seed: derive_seed(config.seed, "judge-selftest"),
                pools: crate::benchgen::WordPools::hard_domain(),
            };
            let (_, test, _) = generate_dataset(&bench)?;
            test
        }
    };
    let mut scene_config = config.scene.clone();
    scene_config.max_subjects = records
        .iter()
        .map(|r| r.tree.subjects.len())
        .max()
        .unwrap_or(scene_config.max_subjects);
    let pools = match &config.judge_dataset {
        Some(_) => config.bench.pools.clone(),
        None => crate::benchgen::WordPools::hard_domain(),
    };
    let scene = SceneDomain::from_pools(scene_config, &pools)?;
    let samples: Vec<(u64, Array1<f64>)> = match &config.judge_samples {
        Some(path) => {
            let f = std::fs::File::open(path)?;
            let mut out = Vec::new();
            for line in std::io::BufRead::lines(std::io::BufReader::new(f)) {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let s: SampleLine = serde_json::from_str(&line)?;
                out.push((s.record_id, Array1::from_vec(s.latent)));
            }
            out
        }
        None => {
            if !config.judge_self_test {
                return Err(CoreError::InvalidConfig(
                    "judge requires judge_samples or judge_self_test".into(),
                ));
            }
            records
                .iter()
                .map(|r| scene.composite_target(&r.tree).map(|z| (r.id, z)))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let items: Vec<(&crate::benchgen::DatasetRecord, Array1<f64>)> = samples
        .into_iter()
        .filter_map(|(id, z)| records.iter().find(|r| r.id == id).map(|r| (r, z)))
        .collect();
    let report = match config.judge_backend.as_str() {
        "oracle" => evaluate_accuracy(&items, &OracleJudge { scene })?,
        "remote" => {
            let endpoint = std::env::var("COMPFLOW_REMOTE_ENDPOINT").map_err(|_| {
                CoreError::InvalidConfig(
                    "judge_backend = remote needs COMPFLOW_REMOTE_ENDPOINT".into(),
                )
            })?;
            let judge = crate::judge::RemoteJudge {
                client: crate::remote::JsonlClient::new(
                    endpoint,
                    crate::remote::RetryPolicy::default(),
                    8,
                ),
            };
            evaluate_accuracy(&items, &judge)?
        }
        other => {
            return Err(CoreError::InvalidConfig(format!(
                "unknown judge backend {other:?}"
            )))
        }
    };
    write_json(&dir.join("accuracy_report.json"), &report)?;
    Ok(())
}

/// Plot-data views over a completed run directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotView {
    RewardCurve,
    Diversity,
    WeightFunction,
    ScheduleComparison,
}

impl std::str::FromStr for PlotView {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reward-curve" => Ok(PlotView::RewardCurve),
            "diversity" => Ok(PlotView::Diversity),
            "weight-function" => Ok(PlotView::WeightFunction),
            "schedule-comparison" => Ok(PlotView::ScheduleComparison),
            other => Err(CoreError::InvalidConfig(format!("unknown view {other:?}"))),
        }
    }
}

/// Emit the delimiter-separated file of a view; returns the file path.
pub fn emit_plot_data(run_dir: &Path, view: PlotView) -> Result<PathBuf> {
    match view {
        PlotView::RewardCurve => {
            let records = read_metrics_jsonl(&run_dir.join("metrics.jsonl"))?;
            let path = run_dir.join("reward_curve.csv");
            write_csv(
                &path,
                "iteration,mean_reward,clip_fraction",
                &records
                    .iter()
                    .map(|r| vec![r.iteration as f64, r.mean_reward, r.clip_fraction])
                    .collect::<Vec<_>>(),
            )?;
            Ok(path)
        }
        PlotView::Diversity => {
            let records = read_metrics_jsonl(&run_dir.join("metrics.jsonl"))?;
            let path = run_dir.join("diversity_curve.csv");
            write_csv(
                &path,
                "iteration,mean_pairwise_distance,covariance_trace",
                &records
                    .iter()
                    .map(|r| {
                        vec![
                            r.iteration as f64,
                            r.mean_pairwise_distance,
                            r.covariance_trace,
                        ]
                    })
                    .collect::<Vec<_>>(),
            )?;
            Ok(path)
        }
        PlotView::WeightFunction => {
            let path = run_dir.join("weight_function.csv");
            if !path.exists() {
                return Err(CoreError::InvalidConfig(
                    "run directory has no weight_function.csv (analyze-schedule runs only)".into(),
                ));
            }
            Ok(path)
        }
        PlotView::ScheduleComparison => {
            let path = run_dir.join("schedule_comparison.csv");
            if !path.exists() {
                return Err(CoreError::InvalidConfig(
                    "run directory has no schedule_comparison.csv (analyze-schedule runs only)"
                        .into(),
                ));
            }
            Ok(path)
        }
    }
}
