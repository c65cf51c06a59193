//! Group-relative policy optimization over recorded SDE trajectories.
//!
//! A group of rollouts shares one condition; rewards are standardized within
//! the group into advantages and the field takes one ascent step on the
//! clipped per-step ratio objective. The policy density of a step is the
//! isotropic Gaussian transition recorded by the sampler, whose mean depends
//! on the field parameters; the objective gradient flows through the mean
//! only (the std is schedule-determined).

use crate::field::{FieldGradient, MlpVelocityField, VelocityModel};
use crate::numeric::{mean, population_std, sample_variance};
use crate::rng::derive_indexed;
use crate::sampler::{
    d_mean_d_velocity, log_normal_isotropic, sample_trajectory, step_mean, SamplerForm, Trajectory,
};
use crate::schedule::StochasticitySchedule;
use crate::{CoreError, Result};
use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

/// Ratios are clamped here; hitting the clamp is counted in the stats.
pub const RATIO_CLAMP_MAX: f64 = 1e6;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    /// Group size n.
    pub group_size: usize,
    /// Clip width ε of the surrogate.
    pub clip_epsilon: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Guard δ added to the population std in the advantage normalizer.
    pub std_guard: f64,
    /// De-noise steps per rollout.
    pub num_steps: usize,
    /// Ascent steps are rescaled so the gradient norm never exceeds this;
    /// near-deterministic late transitions otherwise dominate the update.
    pub max_grad_norm: Option<f64>,
    /// Steps with transition std at or below this floor are treated like
    /// degenerate steps and carry no ratio term. The η = 0 exclusion is the
    /// spec'd case; the small positive floor extends it to transitions whose
    /// density is too sharp to carry usable signal.
    pub degenerate_std_floor: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 16,
            clip_epsilon: 0.2,
            learning_rate: 0.15,
            iterations: 200,
            std_guard: 1e-6,
            num_steps: 16,
            max_grad_norm: Some(1.0),
            degenerate_std_floor: 5e-3,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(CoreError::InvalidConfig(format!(
                "group_size {} < 2",
                self.group_size
            )));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(CoreError::InvalidConfig(format!(
                "clip_epsilon {} outside (0, 1)",
                self.clip_epsilon
            )));
        }
        if self.std_guard <= 0.0 {
            return Err(CoreError::InvalidConfig("std_guard must be > 0".into()));
        }
        Ok(())
    }
}

/// Group-standardized advantages: `A_i = (r_i - mean) / (pop_std + δ)`.
/// Constant-reward groups map to all zeros.
pub fn compute_advantages(rewards: &[f64], guard: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(CoreError::InvalidConfig(format!(
            "advantage normalization needs >= 2 rewards, got {}",
            rewards.len()
        )));
    }
    let m = mean(rewards);
    let s = population_std(rewards);
    Ok(rewards.iter().map(|r| (r - m) / (s + guard)).collect())
}

/// Policy ratio `exp(new - old)`, clamped at [`RATIO_CLAMP_MAX`].
pub fn step_ratio(new_log_prob: f64, old_log_prob: f64) -> f64 {
    (new_log_prob - old_log_prob).exp().min(RATIO_CLAMP_MAX)
}

/// Mean over steps of `min(ρ·A, clip(ρ, 1-ε, 1+ε)·A)`.
pub fn clipped_objective(ratios: &[f64], advantage: f64, epsilon: f64) -> Result<f64> {
    if ratios.is_empty() {
        return Err(CoreError::EmptyBatch);
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(CoreError::InvalidConfig(format!(
            "epsilon {epsilon} outside (0, 1)"
        )));
    }
    let sum: f64 = ratios
        .iter()
        .map(|&r| {
            let clipped = r.clamp(1.0 - epsilon, 1.0 + epsilon);
            (r * advantage).min(clipped * advantage)
        })
        .sum();
    Ok(sum / ratios.len() as f64)
}

/// Terminal-sample reward used for rollout groups.
pub trait RewardFn {
    fn reward(&self, terminal: ArrayView1<f64>) -> Result<f64>;
}

/// `exp(-‖z - target‖²/2)`: the toy target-mode objective.
#[derive(Debug, Clone)]
pub struct TargetModeReward {
    pub target: Array1<f64>,
}

impl RewardFn for TargetModeReward {
    fn reward(&self, terminal: ArrayView1<f64>) -> Result<f64> {
        if terminal.len() != self.target.len() {
            return Err(CoreError::DimensionMismatch {
                expected: self.target.len(),
                got: terminal.len(),
            });
        }
        let d2: f64 = terminal
            .iter()
            .zip(self.target.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok((-0.5 * d2).exp())
    }
}

impl<F> RewardFn for F
where
    F: Fn(ArrayView1<f64>) -> Result<f64>,
{
    fn reward(&self, terminal: ArrayView1<f64>) -> Result<f64> {
        self(terminal)
    }
}

/// A group of rollouts sharing one condition.
#[derive(Debug, Clone)]
pub struct GroupRollout {
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl GroupRollout {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn mean_reward(&self) -> f64 {
        mean(&self.rewards)
    }

    pub fn terminals(&self) -> Vec<Array1<f64>> {
        self.trajectories.iter().map(|t| t.terminal.clone()).collect()
    }
}

/// Sample a group of `config.group_size` trajectories with independent
/// streams, score the terminals, and standardize rewards into advantages.
/// Any reward failure aborts the whole group with the member identified.
pub fn rollout_group<F: VelocityModel, R: RewardFn + ?Sized>(
    field: &F,
    cond: ArrayView1<f64>,
    schedule: &StochasticitySchedule,
    form: SamplerForm,
    reward: &R,
    config: &GrpoConfig,
    seed: u64,
) -> Result<GroupRollout> {
    config.validate()?;
    let mut trajectories = Vec::with_capacity(config.group_size);
    let mut rewards = Vec::with_capacity(config.group_size);
    for i in 0..config.group_size {
        let traj = sample_trajectory(
            field,
            cond,
            schedule,
            form,
            config.num_steps,
            derive_indexed(seed, i as u64),
        )?;
        let r = reward
            .reward(traj.terminal.view())
            .map_err(|e| CoreError::Scorer(format!("group member {i}: {e}")))?;
        if !r.is_finite() {
            return Err(CoreError::Scorer(format!(
                "group member {i}: non-finite reward {r}"
            )));
        }
        trajectories.push(traj);
        rewards.push(r);
    }
    let advantages = compute_advantages(&rewards, config.std_guard)?;
    Ok(GroupRollout {
        trajectories,
        rewards,
        advantages,
    })
}

/// Per-update diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UpdateStats {
    pub objective: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub ratio_clamps: usize,
    pub grad_norm: f64,
    /// Multiplier applied to the gradient by the norm cap (1 when uncapped).
    pub step_scale: f64,
    pub steps_used: usize,
}

struct SurrogateEval {
    objective: f64,
    grad: Option<FieldGradient>,
    mean_ratio: f64,
    clip_fraction: f64,
    ratio_clamps: usize,
    steps_used: usize,
}

/// Shared forward (and optional gradient) pass over the group under the
/// current parameters. The recorded `eta` and `std` reproduce the rollout
/// drift arithmetic bitwise, so ratios are exactly 1 before the first
/// update.
fn surrogate_pass(
    field: &MlpVelocityField,
    group: &GroupRollout,
    config: &GrpoConfig,
    form: SamplerForm,
    with_grad: bool,
) -> Result<SurrogateEval> {
    config.validate()?;
    let n = group.len();
    if n == 0 {
        return Err(CoreError::EmptyBatch);
    }
    let eps = config.clip_epsilon;
    let mut grad = with_grad.then(|| FieldGradient::zeros_like(field));
    let mut objective = 0.0;
    let mut ratio_sum = 0.0;
    let mut clipped = 0usize;
    let mut clamps = 0usize;
    let mut used = 0usize;

    for (traj, &adv) in group.trajectories.iter().zip(&group.advantages) {
        if !adv.is_finite() {
            return Err(CoreError::non_finite("advantage"));
        }
        let included: Vec<_> = traj
            .steps
            .iter()
            .filter(|s| !s.degenerate && s.std > config.degenerate_std_floor)
            .collect();
        if included.is_empty() {
            continue;
        }
        let weight = 1.0 / (included.len() as f64 * n as f64);
        for step in included {
            let (u, cache) = field.forward_cached(step.state.view(), step.t, traj.cond.view());
            let mean_new = step_mean(step.state.view(), step.t, step.s, u.view(), step.eta, form)?;
            let new_lp = log_normal_isotropic(step.next.view(), mean_new.view(), step.std);
            let log_ratio = new_lp - step.log_prob;
            if log_ratio > RATIO_CLAMP_MAX.ln() {
                clamps += 1;
            }
            let rho = step_ratio(new_lp, step.log_prob);
            let lo = 1.0 - eps;
            let hi = 1.0 + eps;
            let rho_clip = rho.clamp(lo, hi);
            objective += weight * (rho * adv).min(rho_clip * adv);
            ratio_sum += rho;
            used += 1;
            if rho < lo || rho > hi {
                clipped += 1;
            }
            if let Some(g) = grad.as_mut() {
                // gradient gates off when the clipped branch is active and
                // binding; inside the clip band both branches agree
                let active = (rho * adv) <= (rho_clip * adv) || (lo..=hi).contains(&rho);
                if active && adv != 0.0 {
                    let coef = d_mean_d_velocity(step.t, step.s, step.eta, form);
                    let scale = weight * adv * rho * coef / (step.std * step.std);
                    let upstream = (&step.next - &mean_new).mapv(|r| r * scale);
                    field.backward_into(&cache, &upstream, g);
                }
            }
        }
    }
    Ok(SurrogateEval {
        objective,
        grad,
        mean_ratio: if used > 0 { ratio_sum / used as f64 } else { 1.0 },
        clip_fraction: if used > 0 {
            clipped as f64 / used as f64
        } else {
            0.0
        },
        ratio_clamps: clamps,
        steps_used: used,
    })
}

/// Clipped surrogate value of the group under the current parameters.
pub fn surrogate_objective(
    field: &MlpVelocityField,
    group: &GroupRollout,
    config: &GrpoConfig,
    form: SamplerForm,
) -> Result<f64> {
    surrogate_pass(field, group, config, form, false).map(|e| e.objective)
}

/// Surrogate value and its parameter gradient (ascent direction).
pub fn surrogate_gradient(
    field: &MlpVelocityField,
    group: &GroupRollout,
    config: &GrpoConfig,
    form: SamplerForm,
) -> Result<(f64, FieldGradient)> {
    let eval = surrogate_pass(field, group, config, form, true)?;
    Ok((eval.objective, eval.grad.expect("gradient requested")))
}

/// One ascent step on the clipped objective. Zero advantages leave the
/// parameters bit-identical.
pub fn grpo_update(
    field: &mut MlpVelocityField,
    group: &GroupRollout,
    config: &GrpoConfig,
    form: SamplerForm,
) -> Result<UpdateStats> {
    let eval = surrogate_pass(field, group, config, form, true)?;
    let grad = eval.grad.expect("gradient requested");
    if !grad.is_finite() {
        let path = std::env::temp_dir().join(format!(
            "grpo-param-snapshot-{}.json",
            std::process::id()
        ));
        field.save(&path)?;
        return Err(CoreError::NonFiniteGradient(path.display().to_string()));
    }
    let norm = grad.norm();
    let step_scale = match config.max_grad_norm {
        Some(max) if norm > max && norm > 0.0 => max / norm,
        _ => 1.0,
    };
    field.apply_gradient(&grad, config.learning_rate * step_scale);
    Ok(UpdateStats {
        objective: eval.objective,
        mean_ratio: eval.mean_ratio,
        clip_fraction: eval.clip_fraction,
        ratio_clamps: eval.ratio_clamps,
        grad_norm: norm,
        step_scale,
        steps_used: eval.steps_used,
    })
}

/// Exact empirical spread statistics of a sample set: mean pairwise
/// Euclidean distance over unordered pairs, and the trace of the
/// Bessel-corrected (divide by n-1) covariance.
pub fn diversity_metrics(samples: &[Array1<f64>]) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(CoreError::InvalidConfig(
            "diversity metrics need >= 2 samples".into(),
        ));
    }
    let n = samples.len();
    let mut dist_sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let d2: f64 = samples[i]
                .iter()
                .zip(samples[j].iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist_sum += d2.sqrt();
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let dim = samples[0].len();
    let mut trace = 0.0;
    for j in 0..dim {
        let col: Vec<f64> = samples.iter().map(|s| s[j]).collect();
        trace += sample_variance(&col);
    }
    Ok((dist_sum / pairs, trace))
}

/// Per-iteration training record, consumed by the metric logs and the plot
/// emitter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub mean_reward: f64,
    pub objective: f64,
    pub clip_fraction: f64,
    pub mean_pairwise_distance: f64,
    pub covariance_trace: f64,
    pub grad_norm: f64,
}

/// Full training loop: one group and one update per iteration.
pub fn run_grpo<R: RewardFn + ?Sized>(
    field: &mut MlpVelocityField,
    cond: ArrayView1<f64>,
    schedule: &StochasticitySchedule,
    form: SamplerForm,
    reward: &R,
    config: &GrpoConfig,
    seed: u64,
) -> Result<Vec<IterationRecord>> {
    config.validate()?;
    let mut records = Vec::with_capacity(config.iterations);
    for iter in 0..config.iterations {
        let group = rollout_group(
            field,
            cond,
            schedule,
            form,
            reward,
            config,
            derive_indexed(seed, iter as u64),
        )?;
        let terminals = group.terminals();
        let (mpd, cov) = diversity_metrics(&terminals)?;
        let stats = grpo_update(field, &group, config, form)?;
        records.push(IterationRecord {
            iteration: iter,
            mean_reward: group.mean_reward(),
            objective: stats.objective,
            clip_fraction: stats.clip_fraction,
            mean_pairwise_distance: mpd,
            covariance_trace: cov,
            grad_norm: stats.grad_norm,
        });
    }
    Ok(records)
}
