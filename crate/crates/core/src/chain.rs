//! Chained synthesis: execute a synthesis plan against a generator backend,
//! threading each step's output latent into later steps' conditioning, and
//! measure concept coverage of the result.
//!
//! Two generator backends exist: the toy conditional flow (the trained
//! field sampled by [`crate::sampler`], conditioning on the concatenated
//! embedding plus reference latents) and a remote backend speaking the
//! external-service wire contract. Only the toy backend is hermetic.

use crate::benchgen::{generate_record, BenchConfig, DatasetRecord, Split, WordPools};
use crate::field::{FieldArchitecture, MlpVelocityField, VelocityModel};
use crate::flow::{flow_matching_loss_grad, FlowSample};
use crate::prompt::{synthesis_plan, NodeId, PromptTree, SynthesisPlan};
use crate::rng::{derive_indexed, derive_seed, stream};
use crate::sampler::{sample_trajectory, SamplerForm, Trajectory};
use crate::scene::{SceneConfig, SceneDomain};
use crate::schedule::StochasticitySchedule;
use crate::{CoreError, Result};
use ndarray::{Array1, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Conditioning input of one generation step: the node's level-prompt
/// embedding plus the dependency outputs in plan order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionContext {
    pub embedding: Array1<f64>,
    pub references: Vec<Array1<f64>>,
}

impl ConditionContext {
    /// Concatenate `[embedding, ref_0, ..., ref_k, 0-padding]` into the
    /// fixed-width condition channel.
    pub fn to_condition_vector(&self, max_refs: usize, latent_dim: usize) -> Result<Array1<f64>> {
        if self.references.len() > max_refs {
            return Err(CoreError::InvalidConfig(format!(
                "{} references exceed the {max_refs}-slot condition channel",
                self.references.len()
            )));
        }
        let mut out = Vec::with_capacity(self.embedding.len() + max_refs * latent_dim);
        out.extend(self.embedding.iter().cloned());
        for r in &self.references {
            if r.len() != latent_dim {
                return Err(CoreError::DimensionMismatch {
                    expected: latent_dim,
                    got: r.len(),
                });
            }
            out.extend(r.iter().cloned());
        }
        out.resize(self.embedding.len() + max_refs * latent_dim, 0.0);
        Ok(Array1::from_vec(out))
    }
}

/// Assemble the context of a step from its embedding and dependency
/// outputs (which must all be present and finite).
pub fn assemble_context(
    embedding: Array1<f64>,
    dependency_outputs: Vec<Array1<f64>>,
) -> Result<ConditionContext> {
    for (i, r) in dependency_outputs.iter().enumerate() {
        if !r.iter().all(|x| x.is_finite()) {
            return Err(CoreError::non_finite(format!("reference latent {i}")));
        }
    }
    Ok(ConditionContext {
        embedding,
        references: dependency_outputs,
    })
}

/// Generation backend consumed by [`run_chain`].
pub trait Generator {
    fn latent_dim(&self) -> usize;
    fn max_references(&self) -> usize;
    /// Terminal latent for the context; deterministic per seed.
    fn generate(&self, ctx: &ConditionContext, seed: u64) -> Result<Array1<f64>>;
    /// Like [`Self::generate`] but optionally exposing the rollout.
    fn generate_with_trajectory(
        &self,
        ctx: &ConditionContext,
        seed: u64,
    ) -> Result<(Array1<f64>, Option<Trajectory>)> {
        self.generate(ctx, seed).map(|z| (z, None))
    }
}

/// The toy conditional flow backend.
pub struct FlowGenerator {
    pub field: MlpVelocityField,
    pub schedule: StochasticitySchedule,
    pub form: SamplerForm,
    pub num_steps: usize,
    pub embed_dim: usize,
    pub max_refs: usize,
}

impl FlowGenerator {
    /// Deterministic (η ≡ 0) generator around a trained field.
    pub fn deterministic(field: MlpVelocityField, num_steps: usize, embed_dim: usize, max_refs: usize) -> Result<Self> {
        Ok(Self {
            field,
            schedule: StochasticitySchedule::constant(0.0, 1.0)?,
            form: SamplerForm::MarginalPreserving,
            num_steps,
            embed_dim,
            max_refs,
        })
    }
}

impl Generator for FlowGenerator {
    fn latent_dim(&self) -> usize {
        self.field.latent_dim()
    }

    fn max_references(&self) -> usize {
        self.max_refs
    }

    fn generate(&self, ctx: &ConditionContext, seed: u64) -> Result<Array1<f64>> {
        self.generate_with_trajectory(ctx, seed).map(|(z, _)| z)
    }

    fn generate_with_trajectory(
        &self,
        ctx: &ConditionContext,
        seed: u64,
    ) -> Result<(Array1<f64>, Option<Trajectory>)> {
        let cond = ctx.to_condition_vector(self.max_refs, self.latent_dim())?;
        if cond.len() != self.field.cond_dim() {
            return Err(CoreError::DimensionMismatch {
                expected: self.field.cond_dim(),
                got: cond.len(),
            });
        }
        let traj = sample_trajectory(
            &self.field,
            cond.view(),
            &self.schedule,
            self.form,
            self.num_steps,
            seed,
        )?;
        Ok((traj.terminal.clone(), Some(traj)))
    }
}

/// Closure-backed generator for tests and oracles.
pub struct FnGenerator<F> {
    pub latent_dim: usize,
    pub max_refs: usize,
    pub f: F,
}

impl<F> Generator for FnGenerator<F>
where
    F: Fn(&ConditionContext, u64) -> Result<Array1<f64>>,
{
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn max_references(&self) -> usize {
        self.max_refs
    }

    fn generate(&self, ctx: &ConditionContext, seed: u64) -> Result<Array1<f64>> {
        (self.f)(ctx, seed)
    }
}

/// Outcome of a chained run. On step failure the partial outputs survive
/// and `failed_step` names the culprit; `final_latent` is present iff every
/// step succeeded.
#[derive(Debug, Clone)]
pub struct ChainResult {
    pub outputs: BTreeMap<NodeId, Array1<f64>>,
    pub final_latent: Option<Array1<f64>>,
    pub failed_step: Option<(NodeId, String)>,
    pub trajectories: Vec<(NodeId, Trajectory)>,
}

impl ChainResult {
    pub fn is_complete(&self) -> bool {
        self.final_latent.is_some()
    }
}

/// Execute the plan in order, threading outputs into later contexts.
/// Step seeds derive from `seed` and the step's node id, so chains replay
/// bitwise.
pub fn run_chain<G: Generator>(
    plan: &SynthesisPlan,
    tree: &PromptTree,
    scene: &SceneDomain,
    generator: &G,
    seed: u64,
    store_trajectories: bool,
) -> Result<ChainResult> {
    let mut outputs: BTreeMap<NodeId, Array1<f64>> = BTreeMap::new();
    let mut trajectories = Vec::new();
    for step in &plan.steps {
        let embedding = scene.condition_embedding(tree, step.target, plan.folded)?;
        let mut refs = Vec::with_capacity(step.deps.len());
        let mut missing = None;
        for dep in &step.deps {
            match outputs.get(dep) {
                Some(z) => refs.push(z.clone()),
                None => {
                    missing = Some(dep.to_string());
                    break;
                }
            }
        }
        let attempt = match missing {
            Some(dep) => Err(CoreError::MissingDependency(dep)),
            None => assemble_context(embedding, refs).and_then(|ctx| {
                let step_seed = derive_seed(seed, &format!("chain-step/{}", step.target));
                generator.generate_with_trajectory(&ctx, step_seed)
            }),
        };
        match attempt {
            Ok((z, traj)) => {
                if store_trajectories {
                    if let Some(t) = traj {
                        trajectories.push((step.target, t));
                    }
                }
                outputs.insert(step.target, z);
            }
            Err(e) => {
                return Ok(ChainResult {
                    outputs,
                    final_latent: None,
                    failed_step: Some((step.target, e.to_string())),
                    trajectories,
                })
            }
        }
    }
    let final_latent = outputs.get(&NodeId::Root).cloned();
    Ok(ChainResult {
        outputs,
        final_latent,
        failed_step: None,
        trajectories,
    })
}

/// Exact concept-coverage counts of one sample against its tree. Fractions
/// are rational counts; empty families count as vacuously covered.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coverage {
    pub exist: (usize, usize),
    pub attribute: (usize, usize),
    pub relationship: (usize, usize),
}

impl Coverage {
    pub fn merge(&mut self, other: &Coverage) {
        self.exist.0 += other.exist.0;
        self.exist.1 += other.exist.1;
        self.attribute.0 += other.attribute.0;
        self.attribute.1 += other.attribute.1;
        self.relationship.0 += other.relationship.0;
        self.relationship.1 += other.relationship.1;
    }

    fn frac(pair: (usize, usize)) -> f64 {
        if pair.1 == 0 {
            1.0
        } else {
            pair.0 as f64 / pair.1 as f64
        }
    }

    pub fn exist_frac(&self) -> f64 {
        Self::frac(self.exist)
    }

    pub fn attribute_frac(&self) -> f64 {
        Self::frac(self.attribute)
    }

    pub fn relationship_frac(&self) -> f64 {
        Self::frac(self.relationship)
    }
}

/// Score a final composite against the domain oracle.
pub fn concept_coverage(
    sample: ArrayView1<f64>,
    tree: &PromptTree,
    scene: &SceneDomain,
) -> Result<Coverage> {
    let mut cov = Coverage::default();
    for i in 0..tree.subjects.len() {
        cov.exist.1 += 1;
        if scene.exist_ok(sample, tree, i)? {
            cov.exist.0 += 1;
        }
        for j in 0..tree.subjects[i].attributes.len() {
            cov.attribute.1 += 1;
            if scene.attribute_ok(sample, tree, i, j)? {
                cov.attribute.0 += 1;
            }
        }
    }
    for k in 0..tree.subjects.len().saturating_sub(1) {
        cov.relationship.1 += 1;
        if scene.relationship_ok(sample, tree, k)? {
            cov.relationship.0 += 1;
        }
    }
    Ok(cov)
}

/// Target latent of a plan node under the scene oracle.
pub fn step_target(scene: &SceneDomain, tree: &PromptTree, node: NodeId) -> Result<Array1<f64>> {
    match node {
        NodeId::Attribute(i, j) => scene.attr_step_target(tree, i, j),
        NodeId::Subject(i) => scene.subject_step_target(tree, i),
        NodeId::Root => scene.composite_target(tree),
    }
}

/// Training setup of the toy conditional generators.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub fold_attributes: bool,
}

impl Default for ChainTrainConfig {
    fn default() -> Self {
        Self {
            steps: 60_000,
            batch_size: 32,
            learning_rate: 0.0075,
            hidden: vec![128, 128],
            fold_attributes: false,
        }
    }
}

fn noisy(target: &Array1<f64>, sigma: f64, rng: &mut impl Rng) -> Array1<f64> {
    target.mapv(|x| {
        let n: f64 = StandardNormal.sample(rng);
        x + sigma * n
    })
}

fn standard_normal_vec(dim: usize, rng: &mut impl Rng) -> Array1<f64> {
    Array1::from_iter((0..dim).map(|_| {
        let x: f64 = StandardNormal.sample(rng);
        x
    }))
}

/// Precomputed training task of one plan step: the condition embedding, the
/// step's target content, and its dependencies' targets (noised per draw to
/// stand in for upstream generations).
struct StepTask {
    embedding: Array1<f64>,
    target: Array1<f64>,
    dep_targets: Vec<Array1<f64>>,
}

fn build_step_tasks(
    scene: &SceneDomain,
    records: &[DatasetRecord],
    plans: &[SynthesisPlan],
) -> Result<Vec<StepTask>> {
    let mut out = Vec::new();
    for (record, plan) in records.iter().zip(plans) {
        for step in &plan.steps {
            out.push(StepTask {
                embedding: scene.condition_embedding(&record.tree, step.target, plan.folded)?,
                target: step_target(scene, &record.tree, step.target)?,
                dep_targets: step
                    .deps
                    .iter()
                    .map(|dep| step_target(scene, &record.tree, *dep))
                    .collect::<Result<Vec<_>>>()?,
            });
        }
    }
    Ok(out)
}

/// One flow-matching sample for a random precomputed step task, conditioned
/// exactly as generation will condition it.
fn chain_flow_sample(
    scene: &SceneDomain,
    tasks: &[StepTask],
    max_refs: usize,
    rng: &mut impl Rng,
) -> Result<FlowSample> {
    let d = scene.composite_dim();
    let sigma = scene.config.sigma_gen;
    let task = &tasks[rng.random_range(0..tasks.len())];
    let ctx = ConditionContext {
        embedding: task.embedding.clone(),
        references: task
            .dep_targets
            .iter()
            .map(|t| noisy(t, sigma, rng))
            .collect(),
    };
    let cond = ctx.to_condition_vector(max_refs, d)?;
    let z0 = noisy(&task.target, sigma, rng);
    Ok(FlowSample {
        z0,
        eps: standard_normal_vec(d, rng),
        t: rng.random::<f64>(),
        cond,
    })
}

/// Monolithic counterpart: the flat-prompt bag embedding conditions the
/// full composite directly; the reference channel stays zero.
fn monolithic_tasks(scene: &SceneDomain, records: &[DatasetRecord]) -> Result<Vec<StepTask>> {
    records
        .iter()
        .map(|r| {
            Ok(StepTask {
                embedding: scene.monolithic_embedding(&r.tree),
                target: scene.composite_target(&r.tree)?,
                dep_targets: Vec::new(),
            })
        })
        .collect()
}

fn train_conditional_field(
    scene: &SceneDomain,
    config: &ChainTrainConfig,
    seed: u64,
    mut draw: impl FnMut(&mut rand_chacha::ChaCha8Rng) -> Result<FlowSample>,
) -> Result<MlpVelocityField> {
    let d = scene.composite_dim();
    let max_refs = scene.config.max_subjects;
    let cond_dim = scene.config.embed_dim + max_refs * d;
    let arch = FieldArchitecture::new(d, cond_dim, config.hidden.clone());
    let mut field = MlpVelocityField::new(arch, derive_seed(seed, "chain-field-init"));
    let mut rng = stream(derive_seed(seed, "chain-train"));
    for step in 0..config.steps {
        let batch: Result<Vec<FlowSample>> =
            (0..config.batch_size).map(|_| draw(&mut rng)).collect();
        let (loss, grad) = flow_matching_loss_grad(&field, &batch?)?;
        if !loss.is_finite() {
            return Err(CoreError::Divergence {
                step,
                detail: format!("loss {loss}"),
            });
        }
        field.apply_gradient(&grad, -config.learning_rate);
    }
    Ok(field)
}

/// Train the chain generator on per-step tasks of the given records.
pub fn train_chain_generator(
    scene: &SceneDomain,
    records: &[DatasetRecord],
    config: &ChainTrainConfig,
    seed: u64,
) -> Result<MlpVelocityField> {
    if records.is_empty() {
        return Err(CoreError::EmptyBatch);
    }
    let plans: Result<Vec<SynthesisPlan>> = records
        .iter()
        .map(|r| synthesis_plan(&r.tree, config.fold_attributes))
        .collect();
    let tasks = build_step_tasks(scene, records, &plans?)?;
    let max_refs = scene.config.max_subjects;
    train_conditional_field(scene, config, derive_seed(seed, "chain"), |rng| {
        chain_flow_sample(scene, &tasks, max_refs, rng)
    })
}

/// Train the monolithic baseline with the same architecture and budget.
pub fn train_monolithic_generator(
    scene: &SceneDomain,
    records: &[DatasetRecord],
    config: &ChainTrainConfig,
    seed: u64,
) -> Result<MlpVelocityField> {
    if records.is_empty() {
        return Err(CoreError::EmptyBatch);
    }
    let tasks = monolithic_tasks(scene, records)?;
    let max_refs = scene.config.max_subjects;
    train_conditional_field(scene, config, derive_seed(seed, "monolithic"), |rng| {
        chain_flow_sample(scene, &tasks, max_refs, rng)
    })
}

/// Monolithic generation: one call conditioned on the flat-prompt bag.
pub fn monolithic_generate<G: Generator>(
    generator: &G,
    tree: &PromptTree,
    scene: &SceneDomain,
    seed: u64,
) -> Result<Array1<f64>> {
    let ctx = ConditionContext {
        embedding: scene.monolithic_embedding(tree),
        references: Vec::new(),
    };
    generator.generate(&ctx, derive_seed(seed, "chain-step/root"))
}

/// Paired chain-vs-monolithic evaluation setup on the hard domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainEvalConfig {
    pub scene: SceneConfig,
    pub subjects_per_record: usize,
    pub train_records: usize,
    pub eval_records: usize,
    pub train: ChainTrainConfig,
    pub sample_steps: usize,
    pub seed: u64,
}

impl Default for ChainEvalConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            subjects_per_record: 3,
            train_records: 384,
            eval_records: 64,
            train: ChainTrainConfig::default(),
            sample_steps: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainEvalReport {
    pub chain: Coverage,
    pub monolithic: Coverage,
    pub records_evaluated: usize,
    pub chain_failures: usize,
}

/// Generate the hard-domain splits, train both generators with equal
/// budgets, and score both on unseen prompts with shared seeds.
pub fn run_chain_eval(config: &ChainEvalConfig) -> Result<ChainEvalReport> {
    let pools = WordPools::hard_domain();
    let mut scene_config = config.scene.clone();
    scene_config.max_subjects = config.subjects_per_record;
    let scene = SceneDomain::from_pools(scene_config, &pools)?;
    let bench = BenchConfig {
        train_size: config.train_records,
        test_size: config.eval_records,
        subjects_min: config.subjects_per_record,
        subjects_max: config.subjects_per_record,
        seed: derive_seed(config.seed, "chain-eval-data"),
        pools,
    };
    let train_records: Result<Vec<_>> = (0..config.train_records as u64)
        .map(|id| generate_record(&bench, Split::Train, id))
        .collect();
    let train_records = train_records?;
    let eval_records: Result<Vec<_>> = (0..config.eval_records as u64)
        .map(|id| generate_record(&bench, Split::Test, 1_000_000 + id))
        .collect();
    let eval_records = eval_records?;

    let chain_field = train_chain_generator(&scene, &train_records, &config.train, config.seed)?;
    let mono_field = train_monolithic_generator(&scene, &train_records, &config.train, config.seed)?;
    let max_refs = scene.config.max_subjects;
    let embed_dim = scene.config.embed_dim;
    let chain_gen =
        FlowGenerator::deterministic(chain_field, config.sample_steps, embed_dim, max_refs)?;
    let mono_gen =
        FlowGenerator::deterministic(mono_field, config.sample_steps, embed_dim, max_refs)?;

    let mut chain_cov = Coverage::default();
    let mut mono_cov = Coverage::default();
    let mut chain_failures = 0usize;
    for record in &eval_records {
        let record_seed = derive_indexed(derive_seed(config.seed, "chain-eval"), record.id);
        let plan = synthesis_plan(&record.tree, config.train.fold_attributes)?;
        let result = run_chain(&plan, &record.tree, &scene, &chain_gen, record_seed, false)?;
        match &result.final_latent {
            Some(z) => chain_cov.merge(&concept_coverage(z.view(), &record.tree, &scene)?),
            None => {
                chain_failures += 1;
                chain_cov.merge(&Coverage {
                    exist: (0, record.tree.subjects.len()),
                    attribute: (
                        0,
                        record.tree.subjects.iter().map(|s| s.attributes.len()).sum(),
                    ),
                    relationship: (0, record.tree.subjects.len().saturating_sub(1)),
                });
            }
        }
        let mono_z = monolithic_generate(&mono_gen, &record.tree, &scene, record_seed)?;
        mono_cov.merge(&concept_coverage(mono_z.view(), &record.tree, &scene)?);
    }
    Ok(ChainEvalReport {
        chain: chain_cov,
        monolithic: mono_cov,
        records_evaluated: eval_records.len(),
        chain_failures,
    })
}
