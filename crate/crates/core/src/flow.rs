//! Rectified-flow data path.
//!
//! The forward interpolation is `z_t = (1-t)·z0 + t·ε` with velocity target
//! `u = ε - z0`; time runs from 1 (pure noise) down to 0 (data). Everything
//! here is exact arithmetic plus a small SGD training loop; the closed-form
//! Gaussian field serves as the oracle the samplers are tested against.

use crate::field::{FieldArchitecture, FieldGradient, MlpVelocityField, VelocityModel};
use crate::rng::{derive_seed, stream};
use crate::{CoreError, Result};
use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Score evaluations are clamped to `t >= T_MIN`; the interpolation's
/// conditional variance `t²` vanishes at t = 0 and makes the score singular.
pub const T_MIN: f64 = 1e-3;

/// A point on the generation path.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Array1<f64>,
    pub t: f64,
}

impl LatentState {
    pub fn new(z: Array1<f64>, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(CoreError::TimeOutOfRange { t, lo: 0.0, hi: 1.0 });
        }
        if !z.iter().all(|x| x.is_finite()) {
            return Err(CoreError::non_finite("latent state"));
        }
        Ok(Self { z, t })
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }
}

/// `z_t = (1-t)·z0 + t·ε`, elementwise.
pub fn forward_noise(z0: ArrayView1<f64>, eps: ArrayView1<f64>, t: f64) -> Result<Array1<f64>> {
    if z0.len() != eps.len() {
        return Err(CoreError::DimensionMismatch {
            expected: z0.len(),
            got: eps.len(),
        });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(CoreError::TimeOutOfRange { t, lo: 0.0, hi: 1.0 });
    }
    Ok(&z0 * (1.0 - t) + &eps * t)
}

/// One deterministic step to a lower noise level: `z_s = z_t + û·(s - t)`.
pub fn euler_ode_step(state: &LatentState, s: f64, u: ArrayView1<f64>) -> Result<LatentState> {
    if !(0.0..state.t).contains(&s) && s != 0.0 {
        return Err(CoreError::TimeOutOfRange {
            t: s,
            lo: 0.0,
            hi: state.t,
        });
    }
    if s >= state.t {
        return Err(CoreError::TimeOutOfRange {
            t: s,
            lo: 0.0,
            hi: state.t,
        });
    }
    if u.len() != state.dim() {
        return Err(CoreError::DimensionMismatch {
            expected: state.dim(),
            got: u.len(),
        });
    }
    if !u.iter().all(|x| x.is_finite()) {
        return Err(CoreError::non_finite("velocity"));
    }
    let z = &state.z + &(&u * (s - state.t));
    LatentState::new(z, s)
}

/// Closed-form conditional velocity for `z0 ~ N(0, σ_d² I)` under the linear
/// interpolation path:
///
/// `u*(z, t) = [(t - (1-t)·σ_d²) / ((1-t)²·σ_d² + t²)] · z`
///
/// This is E[ε - z0 | z_t = z]; the Monte Carlo regression test in this
/// module re-derives the coefficient empirically.
pub fn analytic_gaussian_velocity(
    z: ArrayView1<f64>,
    t: f64,
    sigma_d: f64,
) -> Result<Array1<f64>> {
    if t <= 0.0 || t > 1.0 {
        return Err(CoreError::TimeOutOfRange {
            t,
            lo: f64::MIN_POSITIVE,
            hi: 1.0,
        });
    }
    if sigma_d <= 0.0 {
        return Err(CoreError::InvalidConfig(format!("sigma_d {sigma_d} <= 0")));
    }
    let s2 = sigma_d * sigma_d;
    let coeff = (t - (1.0 - t) * s2) / ((1.0 - t) * (1.0 - t) * s2 + t * t);
    Ok(z.mapv(|x| coeff * x))
}

/// [`VelocityModel`] wrapper around [`analytic_gaussian_velocity`].
#[derive(Debug, Clone)]
pub struct AnalyticGaussianField {
    pub dim: usize,
    pub sigma_d: f64,
}

impl VelocityModel for AnalyticGaussianField {
    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn cond_dim(&self) -> usize {
        0
    }

    fn velocity(&self, z: ArrayView1<f64>, t: f64, _cond: ArrayView1<f64>) -> Array1<f64> {
        analytic_gaussian_velocity(z, t, self.sigma_d).expect("t in (0, 1]")
    }
}

/// One isotropic Gaussian mode of a synthetic domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianMode {
    pub mean: Vec<f64>,
    pub std: f64,
    pub label: String,
}

/// Mixture-of-Gaussians stand-in for a data distribution, with one concept
/// label per mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticDomain {
    pub dim: usize,
    pub modes: Vec<GaussianMode>,
}

impl SyntheticDomain {
    pub fn new(dim: usize, modes: Vec<GaussianMode>) -> Result<Self> {
        if dim == 0 {
            return Err(CoreError::InvalidConfig("dim must be >= 1".into()));
        }
        if modes.is_empty() {
            return Err(CoreError::InvalidConfig("at least one mode".into()));
        }
        for m in &modes {
            if m.mean.len() != dim {
                return Err(CoreError::DimensionMismatch {
                    expected: dim,
                    got: m.mean.len(),
                });
            }
            if m.std <= 0.0 {
                return Err(CoreError::InvalidConfig(format!(
                    "mode {:?} has std {} <= 0",
                    m.label, m.std
                )));
            }
        }
        let mut labels: Vec<&str> = modes.iter().map(|m| m.label.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() != modes.len() {
            return Err(CoreError::InvalidConfig("duplicate mode labels".into()));
        }
        Ok(Self { dim, modes })
    }

    /// Single isotropic Gaussian at `mean`.
    pub fn single(mean: Vec<f64>, std: f64) -> Result<Self> {
        let dim = mean.len();
        Self::new(
            dim,
            vec![GaussianMode {
                mean,
                std,
                label: "mode0".into(),
            }],
        )
    }

    /// `k` equal-weight modes on a circle of the given radius (d = 2).
    pub fn ring(k: usize, radius: f64, std: f64) -> Result<Self> {
        let modes = (0..k)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                GaussianMode {
                    mean: vec![radius * a.cos(), radius * a.sin()],
                    std,
                    label: format!("mode{i}"),
                }
            })
            .collect();
        Self::new(2, modes)
    }

    /// Draw `(z0, mode index)` from the equal-weight mixture.
    pub fn sample(&self, rng: &mut impl Rng) -> (Array1<f64>, usize) {
        let k = rng.random_range(0..self.modes.len());
        let mode = &self.modes[k];
        let z = Array1::from_iter(mode.mean.iter().map(|&m| {
            let x: f64 = StandardNormal.sample(rng);
            m + mode.std * x
        }));
        (z, k)
    }

    /// Index and distance of the closest mode mean.
    pub fn nearest_mode(&self, z: ArrayView1<f64>) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, m) in self.modes.iter().enumerate() {
            let d2: f64 = m
                .mean
                .iter()
                .zip(z.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let d = d2.sqrt();
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    /// Whether `z` lies within `k` standard deviations of some mode.
    pub fn within_sigmas(&self, z: ArrayView1<f64>, k: f64) -> bool {
        let (idx, dist) = self.nearest_mode(z);
        dist <= k * self.modes[idx].std
    }
}

/// One regression sample for the flow-matching loss.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub z0: Array1<f64>,
    pub eps: Array1<f64>,
    pub t: f64,
    pub cond: Array1<f64>,
}

/// Mean squared regression loss onto `u = ε - z0`, with its gradient as a
/// flat vector (layout of [`MlpVelocityField::flat_parameters`]).
pub fn flow_matching_loss(
    field: &MlpVelocityField,
    batch: &[FlowSample],
) -> Result<(f64, Array1<f64>)> {
    let (loss, grad) = flow_matching_loss_grad(field, batch)?;
    Ok((loss, grad.flat()))
}

/// Structured-gradient variant used by the training loop.
pub fn flow_matching_loss_grad(
    field: &MlpVelocityField,
    batch: &[FlowSample],
) -> Result<(f64, FieldGradient)> {
    if batch.is_empty() {
        return Err(CoreError::EmptyBatch);
    }
    let d = field.latent_dim();
    let n = batch.len();
    let mut x = Array2::zeros((n, field.arch.input_dim()));
    let mut target = Array2::zeros((n, d));
    for (i, s) in batch.iter().enumerate() {
        if s.z0.len() != d || s.eps.len() != d {
            return Err(CoreError::DimensionMismatch {
                expected: d,
                got: s.z0.len().max(s.eps.len()),
            });
        }
        if s.cond.len() != field.cond_dim() {
            return Err(CoreError::DimensionMismatch {
                expected: field.cond_dim(),
                got: s.cond.len(),
            });
        }
        let zt = forward_noise(s.z0.view(), s.eps.view(), s.t)?;
        for j in 0..d {
            x[[i, j]] = zt[j];
            target[[i, j]] = s.eps[j] - s.z0[j];
        }
        x[[i, d]] = s.t;
        for (j, &c) in s.cond.iter().enumerate() {
            x[[i, d + 1 + j]] = c;
        }
    }
    let (out, cache) = field.forward_batch(&x);
    let resid = &out - &target;
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / n as f64;
    let upstream = resid.mapv(|r| 2.0 * r / n as f64);
    let mut grad = FieldGradient::zeros_like(field);
    field.backward_batch_into(&cache, &upstream, &mut grad);
    Ok((loss, grad))
}

/// Loss only (held-out evaluation).
pub fn flow_matching_loss_value(field: &MlpVelocityField, batch: &[FlowSample]) -> Result<f64> {
    flow_matching_loss_grad(field, batch).map(|(l, _)| l)
}

/// Mean `‖u_ref(z_t,t) - (ε - z0)‖²` of an arbitrary reference field on the
/// batch; used to price the analytic minimum of the regression.
pub fn reference_field_loss<F: VelocityModel>(field: &F, batch: &[FlowSample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(CoreError::EmptyBatch);
    }
    let empty = Array1::zeros(field.cond_dim());
    let mut acc = 0.0;
    for s in batch {
        let zt = forward_noise(s.z0.view(), s.eps.view(), s.t)?;
        let u = field.velocity(zt.view(), s.t.max(f64::MIN_POSITIVE), empty.view());
        acc += u
            .iter()
            .zip(s.eps.iter().zip(s.z0.iter()))
            .map(|(ui, (e, z))| (ui - (e - z)).powi(2))
            .sum::<f64>();
    }
    Ok(acc / batch.len() as f64)
}

/// Plain-SGD training configuration. Every field has a default so configs
/// stay terse in TOML.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// Held-out batch size for the final loss check.
    pub holdout_size: usize,
    /// Training fails with `Divergence` if the loss is non-finite, and the
    /// outcome is flagged when the held-out loss exceeds this bound.
    pub loss_threshold: Option<f64>,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            learning_rate: 0.05,
            batch_size: 32,
            seed: 0,
            hidden: vec![48, 48],
            holdout_size: 2048,
            loss_threshold: None,
            log_every: 200,
        }
    }
}

/// Result of [`train_velocity_field`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub field: MlpVelocityField,
    pub holdout_loss: f64,
    /// `(step, minibatch loss)` every `log_every` steps.
    pub loss_log: Vec<(usize, f64)>,
}

fn draw_batch(domain: &SyntheticDomain, n: usize, rng: &mut impl Rng) -> Vec<FlowSample> {
    (0..n)
        .map(|_| {
            let (z0, _) = domain.sample(rng);
            let eps = Array1::from_iter((0..domain.dim).map(|_| {
                let x: f64 = StandardNormal.sample(rng);
                x
            }));
            let t: f64 = rng.random::<f64>();
            FlowSample {
                z0,
                eps,
                t,
                cond: Array1::zeros(0),
            }
        })
        .collect()
}

/// Fit an unconditional velocity field to the domain with plain SGD at a
/// fixed step size. Deterministic for a fixed seed.
pub fn train_velocity_field(domain: &SyntheticDomain, config: &TrainConfig) -> Result<TrainOutcome> {
    let arch = FieldArchitecture::new(domain.dim, 0, config.hidden.clone());
    let mut field = MlpVelocityField::new(arch, derive_seed(config.seed, "field-init"));
    let mut rng = stream(derive_seed(config.seed, "train-batches"));
    let mut loss_log = Vec::new();
    for step in 0..config.steps {
        let batch = draw_batch(domain, config.batch_size, &mut rng);
        let (loss, grad) = flow_matching_loss_grad(&field, &batch)?;
        if !loss.is_finite() {
            return Err(CoreError::Divergence {
                step,
                detail: format!("minibatch loss {loss}"),
            });
        }
        field.apply_gradient(&grad, -config.learning_rate);
        if step % config.log_every == 0 || step + 1 == config.steps {
            loss_log.push((step, loss));
        }
    }
    let mut holdout_rng = stream(derive_seed(config.seed, "holdout"));
    let holdout = draw_batch(domain, config.holdout_size, &mut holdout_rng);
    let holdout_loss = flow_matching_loss_value(&field, &holdout)?;
    if let Some(thresh) = config.loss_threshold {
        if !(holdout_loss <= thresh) {
            return Err(CoreError::Divergence {
                step: config.steps,
                detail: format!("held-out loss {holdout_loss} above threshold {thresh}"),
            });
        }
    }
    Ok(TrainOutcome {
        field,
        holdout_loss,
        loss_log,
    })
}
