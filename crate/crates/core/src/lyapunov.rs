//! Covariance propagation for the linearized reverse SDE and the
//! budget-constrained stochasticity-allocation problem.
//!
//! The linearized dynamics around the mean trajectory are isotropic,
//! `A_t = -λ(t)·I`, with diffusion `g(t)·η(t)`. A perturbation injected at
//! time `s` (generation runs t = T → 0) survives the remaining contraction
//! `Φ(0,s) = exp(-∫₀^s λ(τ)dτ)`, so the terminal covariance trace is
//!
//! `Tr(Σ₀) = d · ∫₀^T Φ(0,s)² g(s)² η(s)² ds = ∫₀^T η(s)² W(s) ds`
//!
//! with weight `W(s) = d · g(s)² · Φ(0,s)²`. Allocating a fixed budget
//! `∫ η² = C` to maximize the trace is a linear program over η²; its optimum
//! concentrates where `W` is largest.

use crate::numeric::composite_simpson;
use crate::rng::{derive_indexed, stream};
use crate::schedule::{ScheduleKind, StochasticitySchedule};
use crate::{CoreError, Result};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Isotropic linear SDE test model: contraction rate λ(t) and squared
/// diffusion g(t)² on `[0, horizon]`.
#[derive(Clone)]
pub struct LinearSdeModel {
    pub dim: usize,
    pub horizon: f64,
    lambda: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    g_squared: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub name: String,
}

impl std::fmt::Debug for LinearSdeModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LinearSdeModel")
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .field("name", &self.name)
            .finish()
    }
}

impl LinearSdeModel {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        horizon: f64,
        lambda: impl Fn(f64) -> f64 + Send + Sync + 'static,
        g_squared: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            horizon,
            lambda: Arc::new(lambda),
            g_squared: Arc::new(g_squared),
            name: name.into(),
        }
    }

    pub fn lambda(&self, t: f64) -> f64 {
        (self.lambda)(t)
    }

    pub fn g_squared(&self, t: f64) -> f64 {
        (self.g_squared)(t)
    }

    /// Constant coefficients; `W(s) = d·g²·e^(-2λs)`.
    pub fn constant(dim: usize, lambda: f64, g: f64, horizon: f64) -> Self {
        Self::new(
            format!("constant(lambda={lambda}, g={g})"),
            dim,
            horizon,
            move |_| lambda,
            move |_| g * g,
        )
    }

    /// The shipped verification model: λ = 0.5, g(s)² = s, T = 1, d = 1,
    /// giving `W(s) = s·e^(-s)`, monotone increasing in s on [0, 1].
    pub fn shipped_verification() -> Self {
        Self::new("shipped(lambda=0.5, g2=s)", 1, 1.0, |_| 0.5, |s| s)
    }

    /// λ ≡ 0, g ≡ 1: flat weight, every allocation ties.
    pub fn flat() -> Self {
        Self::constant(1, 0.0, 1.0, 1.0)
    }
}

/// Propagated covariance summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LyapunovResult {
    /// Grid times s (length grid_size + 1).
    pub grid: Vec<f64>,
    pub sigma0_trace: f64,
    /// W(s) on the grid.
    pub w_values: Vec<f64>,
    pub schedule: StochasticitySchedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Monotonicity {
    /// Increasing in s, i.e. decreasing along generation order T → 0.
    IncreasingInS,
    DecreasingInS,
    Flat,
    NonMonotone,
}

/// Segment endpoints where the integrand may be non-smooth (piecewise bins).
fn integration_segments(schedule: Option<&StochasticitySchedule>, horizon: f64) -> Vec<(f64, f64)> {
    if let Some(s) = schedule {
        if s.kind == ScheduleKind::PiecewiseConstant {
            return s
                .bins
                .as_ref()
                .expect("piecewise bins")
                .iter()
                .map(|&((lo, hi), _)| (lo, hi))
                .collect();
        }
    }
    vec![(0.0, horizon)]
}

/// Cumulative Λ(s) = ∫₀^s λ on a fine uniform grid of `2n+1` points over
/// `[0, horizon]`, via per-panel Simpson (odd points by quadratic rule).
fn cumulative_lambda(model: &LinearSdeModel, n: usize) -> (Vec<f64>, Vec<f64>) {
    let fine = 2 * n;
    let h = model.horizon / fine as f64;
    let xs: Vec<f64> = (0..=fine).map(|i| i as f64 * h).collect();
    let lam: Vec<f64> = xs.iter().map(|&x| model.lambda(x)).collect();
    let mut cum = vec![0.0; fine + 1];
    for k in 0..n {
        let i = 2 * k;
        cum[i + 1] = cum[i] + h / 12.0 * (5.0 * lam[i] + 8.0 * lam[i + 1] - lam[i + 2]);
        cum[i + 2] = cum[i] + h / 3.0 * (lam[i] + 4.0 * lam[i + 1] + lam[i + 2]);
    }
    (xs, cum)
}

fn validate_grid(model: &LinearSdeModel, grid_size: usize) -> Result<()> {
    if grid_size < 16 {
        return Err(CoreError::InvalidConfig(format!(
            "grid_size {grid_size} < 16"
        )));
    }
    let probe = 2 * grid_size;
    for i in 0..=probe {
        let t = model.horizon * i as f64 / probe as f64;
        if !model.lambda(t).is_finite() || !model.g_squared(t).is_finite() {
            return Err(CoreError::non_finite(format!("model coefficients at t={t}")));
        }
    }
    Ok(())
}

/// Λ-interpolating helper over the fine grid (piecewise linear between fine
/// points; the fine grid is dense enough that this is below quadrature
/// error).
fn lambda_interp(xs: &[f64], cum: &[f64], s: f64) -> f64 {
    let h = xs[1] - xs[0];
    let pos = (s / h).clamp(0.0, (xs.len() - 1) as f64);
    let i = (pos.floor() as usize).min(xs.len() - 2);
    let w = pos - i as f64;
    cum[i] * (1.0 - w) + cum[i + 1] * w
}

/// Terminal covariance trace under the schedule, by composite quadrature.
pub fn propagate_lyapunov(
    model: &LinearSdeModel,
    schedule: &StochasticitySchedule,
    grid_size: usize,
) -> Result<LyapunovResult> {
    validate_grid(model, grid_size)?;
    if (schedule.t_max - model.horizon).abs() > 1e-9 {
        return Err(CoreError::InvalidSchedule(format!(
            "schedule t_max {} != model horizon {}",
            schedule.t_max, model.horizon
        )));
    }
    let (xs, cum) = cumulative_lambda(model, grid_size.max(512));
    let d = model.dim as f64;
    let weight = |s: f64| d * model.g_squared(s) * (-2.0 * lambda_interp(&xs, &cum, s)).exp();

    let mut trace = 0.0;
    for (lo, hi) in integration_segments(Some(schedule), model.horizon) {
        let frac = (hi - lo) / model.horizon;
        let panels = ((grid_size as f64 * frac).ceil() as usize).max(8);
        let eta_sq = |s: f64| {
            let e = schedule.eta_at(s.clamp(lo, hi.min(schedule.t_max))).expect("in range");
            e * e
        };
        // evaluate eta inside the half-open bin to dodge the boundary value
        let mid_bias = 1e-12 * model.horizon;
        let f = |s: f64| {
            let s_eta = if s >= hi { hi - mid_bias } else { s.max(lo) };
            weight(s) * eta_sq(s_eta)
        };
        trace += composite_simpson(&f, lo, hi, panels);
    }

    let grid: Vec<f64> = (0..=grid_size)
        .map(|i| model.horizon * i as f64 / grid_size as f64)
        .collect();
    let w_values: Vec<f64> = grid.iter().map(|&s| weight(s)).collect();
    Ok(LyapunovResult {
        grid,
        sigma0_trace: trace,
        w_values,
        schedule: schedule.clone(),
    })
}

/// `(s, W(s))` table plus a monotonicity classification.
pub fn weight_function(
    model: &LinearSdeModel,
    grid_size: usize,
) -> Result<(Vec<(f64, f64)>, Monotonicity)> {
    validate_grid(model, grid_size)?;
    let (xs, cum) = cumulative_lambda(model, grid_size.max(512));
    let d = model.dim as f64;
    let table: Vec<(f64, f64)> = (0..=grid_size)
        .map(|i| {
            let s = model.horizon * i as f64 / grid_size as f64;
            (s, d * model.g_squared(s) * (-2.0 * lambda_interp(&xs, &cum, s)).exp())
        })
        .collect();
    let max_w = table.iter().map(|&(_, w)| w.abs()).fold(0.0, f64::max);
    let tol = 1e-9 * max_w.max(1e-30);
    let spread = table
        .iter()
        .map(|&(_, w)| w)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), w| {
            (lo.min(w), hi.max(w))
        });
    let mono = if spread.1 - spread.0 <= 1e-9 * max_w.max(1e-30) {
        Monotonicity::Flat
    } else {
        let mut up = true;
        let mut down = true;
        for pair in table.windows(2) {
            if pair[1].1 < pair[0].1 - tol {
                up = false;
            }
            if pair[1].1 > pair[0].1 + tol {
                down = false;
            }
        }
        match (up, down) {
            (true, false) => Monotonicity::IncreasingInS,
            (false, true) => Monotonicity::DecreasingInS,
            (true, true) => Monotonicity::Flat,
            (false, false) => Monotonicity::NonMonotone,
        }
    };
    Ok((table, mono))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AllocationFamily {
    /// Piecewise-constant η² ≥ 0 on K uniform bins, free shape.
    FreeBins,
    /// η² non-increasing along generation order (non-decreasing in s).
    MonotoneDecreasingBins,
    /// Cosine-decay members at the given budget (includes the constant
    /// schedule as the degenerate eta_min = eta_max member).
    CosineFamily,
}

/// Bin integrals ∫_bin W(s) ds on K uniform bins.
fn bin_weight_integrals(model: &LinearSdeModel, k: usize, grid_size: usize) -> Vec<f64> {
    let (xs, cum) = cumulative_lambda(model, grid_size.max(512));
    let d = model.dim as f64;
    let weight = |s: f64| d * model.g_squared(s) * (-2.0 * lambda_interp(&xs, &cum, s)).exp();
    (0..k)
        .map(|i| {
            let lo = model.horizon * i as f64 / k as f64;
            let hi = model.horizon * (i + 1) as f64 / k as f64;
            composite_simpson(&weight, lo, hi, (grid_size / k).max(16))
        })
        .collect()
}

fn piecewise_from_eta_sq(eta_sq: &[f64], horizon: f64) -> Result<StochasticitySchedule> {
    let k = eta_sq.len();
    let bins = eta_sq
        .iter()
        .enumerate()
        .map(|(i, &e2)| {
            (
                (
                    horizon * i as f64 / k as f64,
                    horizon * (i + 1) as f64 / k as f64,
                ),
                e2.max(0.0).sqrt(),
            )
        })
        .collect();
    StochasticitySchedule::piecewise(bins, horizon)
}

/// Enumerate compositions of `units` budget units over `k` bins.
fn compositions(units: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(units: usize, k: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == 1 {
            prefix.push(units);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for take in 0..=units {
            prefix.push(take);
            rec(units - take, k - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(units, k, &mut Vec::new(), &mut out);
    out
}

/// Budget granularity of the exhaustive searches: allocations move in units
/// of C/ALLOCATION_UNITS.
pub const ALLOCATION_UNITS: usize = 12;

/// Best schedule of the family at the given budget, with its trace.
pub fn optimize_allocation(
    model: &LinearSdeModel,
    budget: f64,
    k: usize,
    family: AllocationFamily,
) -> Result<(StochasticitySchedule, f64)> {
    if budget <= 0.0 || !budget.is_finite() {
        return Err(CoreError::InvalidConfig(format!("budget {budget} <= 0")));
    }
    if !(2..=16).contains(&k) && family != AllocationFamily::CosineFamily {
        return Err(CoreError::InvalidConfig(format!("K {k} outside [2, 16]")));
    }
    let grid_size = 1024;
    let t = model.horizon;
    match family {
        AllocationFamily::FreeBins => {
            // Linear objective over the budget simplex: the optimum is an
            // extreme point, i.e. the whole budget in one bin. Evaluate all
            // K vertices.
            let integrals = bin_weight_integrals(model, k, grid_size);
            let dt = t / k as f64;
            let mut best: Option<(usize, f64)> = None;
            for (i, &wi) in integrals.iter().enumerate() {
                let obj = (budget / dt) * wi;
                if best.map_or(true, |(_, b)| obj > b) {
                    best = Some((i, obj));
                }
            }
            let (idx, _) = best.expect("k >= 2");
            let mut eta_sq = vec![0.0; k];
            eta_sq[idx] = budget / dt;
            let schedule = piecewise_from_eta_sq(&eta_sq, t)?;
            let trace = propagate_lyapunov(model, &schedule, grid_size)?.sigma0_trace;
            Ok((schedule, trace))
        }
        AllocationFamily::MonotoneDecreasingBins => {
            let integrals = bin_weight_integrals(model, k, grid_size);
            let dt = t / k as f64;
            let unit = budget / ALLOCATION_UNITS as f64 / dt; // eta^2 per unit
            let mut best: Option<(Vec<usize>, f64)> = None;
            for combo in compositions(ALLOCATION_UNITS, k) {
                if combo.windows(2).any(|w| w[1] < w[0]) {
                    continue; // must be non-decreasing in s
                }
                let obj: f64 = combo
                    .iter()
                    .zip(&integrals)
                    .map(|(&c, &wi)| c as f64 * unit * wi)
                    .sum();
                if best.as_ref().map_or(true, |(_, b)| obj > *b) {
                    best = Some((combo, obj));
                }
            }
            let (combo, _) = best.expect("nonempty family");
            let eta_sq: Vec<f64> = combo.iter().map(|&c| c as f64 * unit).collect();
            let schedule = piecewise_from_eta_sq(&eta_sq, t)?;
            let trace = propagate_lyapunov(model, &schedule, grid_size)?.sigma0_trace;
            Ok((schedule, trace))
        }
        AllocationFamily::CosineFamily => {
            let eta_const = (budget / t).sqrt();
            let mut best: Option<(StochasticitySchedule, f64)> = None;
            let sweeps = 64;
            for i in 0..=sweeps {
                let eta_min = eta_const * i as f64 / sweeps as f64;
                let Ok(sched) = StochasticitySchedule::cosine_with_budget(eta_min, budget, t)
                else {
                    continue;
                };
                let trace = propagate_lyapunov(model, &sched, grid_size)?.sigma0_trace;
                if best.as_ref().map_or(true, |(_, b)| trace > *b) {
                    best = Some((sched, trace));
                }
            }
            best.ok_or_else(|| CoreError::InvalidConfig("empty cosine sweep".into()))
        }
    }
}

/// Monte Carlo estimate of the terminal covariance trace by Euler-Maruyama
/// from a deterministic start, with a normal-theory standard error.
pub fn monte_carlo_variance(
    model: &LinearSdeModel,
    schedule: &StochasticitySchedule,
    n: usize,
    steps: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n < 1000 {
        return Err(CoreError::InvalidConfig(format!("n {n} < 1000")));
    }
    if (schedule.t_max - model.horizon).abs() > 1e-9 {
        return Err(CoreError::InvalidSchedule(
            "schedule horizon != model horizon".into(),
        ));
    }
    // Discretization self-test with the model's extreme coefficients: the
    // discrete variance recursion has a closed form for constant
    // coefficients; reject step counts whose bias would exceed 2%.
    let probe = 256;
    let lam_max = (0..=probe)
        .map(|i| model.lambda(model.horizon * i as f64 / probe as f64).abs())
        .fold(0.0, f64::max);
    let g2_max = (0..=probe)
        .map(|i| model.g_squared(model.horizon * i as f64 / probe as f64))
        .fold(0.0, f64::max);
    let eta_max = schedule.eta_max;
    if lam_max > 0.0 && g2_max > 0.0 && eta_max > 0.0 {
        let dt = model.horizon / steps as f64;
        let q = g2_max * eta_max * eta_max * dt;
        let a = (1.0 - lam_max * dt).powi(2);
        let mut m = 0.0;
        for _ in 0..steps {
            m = a * m + q;
        }
        let cont = g2_max * eta_max * eta_max * (1.0 - (-2.0 * lam_max * model.horizon).exp())
            / (2.0 * lam_max);
        let bias = ((m - cont) / cont).abs();
        if bias > 0.02 {
            return Err(CoreError::InvalidConfig(format!(
                "step count {steps} too small: constant-coefficient self-test bias {bias:.3}"
            )));
        }
    }

    let d = model.dim;
    let dt = model.horizon / steps as f64;
    let sqrt_dt = dt.sqrt();
    let mut terminals = vec![vec![0.0f64; n]; d];
    for p in 0..n {
        let mut rng = stream(derive_indexed(seed, p as u64));
        let mut x = vec![0.0f64; d];
        for k in 0..steps {
            // forward generation time tau = k*dt, model time t = T - tau
            let t = (model.horizon - k as f64 * dt).clamp(0.0, model.horizon);
            let lam = model.lambda(t);
            let g = model.g_squared(t).max(0.0).sqrt();
            let eta = schedule.eta_at(t.clamp(0.0, schedule.t_max))?;
            for xi in x.iter_mut() {
                let w: f64 = StandardNormal.sample(&mut rng);
                *xi += -lam * *xi * dt + g * eta * sqrt_dt * w;
            }
        }
        for (j, &xj) in x.iter().enumerate() {
            terminals[j][p] = xj;
        }
    }
    let mut trace = 0.0;
    let mut var_of_trace = 0.0;
    for dim_samples in &terminals {
        let v = crate::numeric::sample_variance(dim_samples);
        trace += v;
        var_of_trace += 2.0 * v * v / (n as f64 - 1.0);
    }
    Ok((trace, var_of_trace.sqrt()))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub enum OptimalityStatus {
    /// W monotone increasing in s and all three dominance checks hold.
    Holds,
    /// Flat weight: all allocations tie.
    Flat,
    /// W not monotone increasing in s; the theorem's assumption regime is
    /// not satisfied and no assertion is made.
    Inapplicable(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimalityReport {
    pub status: OptimalityStatus,
    pub monotonicity: Monotonicity,
    /// Free-bins optimum is non-increasing along generation order.
    pub free_bins_optimum_decaying: Option<bool>,
    /// Every monotone-decaying K-bin allocation beats its time mirror.
    pub monotone_dominates_mirror: Option<bool>,
    /// Tr(Σ₀): cosine-decay ≥ constant ≥ reversed-cosine at equal budget.
    pub cosine_ordering: Option<(f64, f64, f64)>,
}

/// Check the allocation-optimality mechanism on a model whose weight is
/// monotone, and refuse to assert anything when it is not.
pub fn verify_decreasing_optimality(
    model: &LinearSdeModel,
    budget: f64,
    k: usize,
) -> Result<OptimalityReport> {
    let (_, mono) = weight_function(model, 512)?;
    match mono {
        Monotonicity::Flat => Ok(OptimalityReport {
            status: OptimalityStatus::Flat,
            monotonicity: mono,
            free_bins_optimum_decaying: None,
            monotone_dominates_mirror: None,
            cosine_ordering: None,
        }),
        Monotonicity::DecreasingInS | Monotonicity::NonMonotone => Ok(OptimalityReport {
            status: OptimalityStatus::Inapplicable(
                "weight not monotone increasing in s: the increasing-contractivity \
                 assumption regime is not satisfied"
                    .into(),
            ),
            monotonicity: mono,
            free_bins_optimum_decaying: None,
            monotone_dominates_mirror: None,
            cosine_ordering: None,
        }),
        Monotonicity::IncreasingInS => {
            let t = model.horizon;
            let grid_size = 1024;

            // (a) free-bins optimum decays along generation order
            let (free_sched, _) = optimize_allocation(model, budget, k, AllocationFamily::FreeBins)?;
            let etas: Vec<f64> = free_sched
                .bins
                .as_ref()
                .expect("piecewise")
                .iter()
                .map(|b| b.1)
                .collect();
            let decaying = etas.windows(2).all(|w| w[1] >= w[0] - 1e-12);

            // (b) every monotone-decaying allocation dominates its mirror
            let integrals = bin_weight_integrals(model, k, grid_size);
            let dt = t / k as f64;
            let unit = budget / ALLOCATION_UNITS as f64 / dt;
            let mut dominates = true;
            for combo in compositions(ALLOCATION_UNITS, k) {
                if combo.windows(2).any(|w| w[1] < w[0]) {
                    continue;
                }
                let fwd: f64 = combo
                    .iter()
                    .zip(&integrals)
                    .map(|(&c, &wi)| c as f64 * unit * wi)
                    .sum();
                let rev: f64 = combo
                    .iter()
                    .rev()
                    .zip(&integrals)
                    .map(|(&c, &wi)| c as f64 * unit * wi)
                    .sum();
                if fwd < rev - 1e-12 * fwd.abs().max(1.0) {
                    dominates = false;
                    break;
                }
            }

            // (c) cosine-decay >= constant >= reversed-cosine at equal budget
            let eta_c = (budget / t).sqrt();
            let constant = StochasticitySchedule::constant(eta_c, t)?;
            let cosine = StochasticitySchedule::cosine_with_budget(0.0, budget, t)?;
            let reversed = StochasticitySchedule::reversed_cosine(0.0, cosine.eta_max, t)?;
            let tr_cos = propagate_lyapunov(model, &cosine, grid_size)?.sigma0_trace;
            let tr_con = propagate_lyapunov(model, &constant, grid_size)?.sigma0_trace;
            let tr_rev = propagate_lyapunov(model, &reversed, grid_size)?.sigma0_trace;
            let ordering_ok = tr_cos >= tr_con && tr_con >= tr_rev;

            let status = if decaying && dominates && ordering_ok {
                OptimalityStatus::Holds
            } else {
                OptimalityStatus::Inapplicable(format!(
                    "mechanism check failed: decaying={decaying} dominates={dominates} \
                     ordering=({tr_cos:.6}, {tr_con:.6}, {tr_rev:.6})"
                ))
            };
            Ok(OptimalityReport {
                status,
                monotonicity: mono,
                free_bins_optimum_decaying: Some(decaying),
                monotone_dominates_mirror: Some(dominates),
                cosine_ordering: Some((tr_cos, tr_con, tr_rev)),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const E: f64 = std::f64::consts::E;

    #[test]
    fn scalar_ou_closed_form() {
        // lambda = 1, g = 1, eta = 1, T = 1, d = 1 -> (1 - e^-2)/2
        let model = LinearSdeModel::constant(1, 1.0, 1.0, 1.0);
        let sched = StochasticitySchedule::constant(1.0, 1.0).unwrap();
        let r = propagate_lyapunov(&model, &sched, 256).unwrap();
        let exact = (1.0 - E.powi(-2)) / 2.0;
        assert!(
            ((r.sigma0_trace - exact) / exact).abs() < 1e-3,
            "{} vs {exact}",
            r.sigma0_trace
        );
        // tighter at larger grids
        let r = propagate_lyapunov(&model, &sched, 2048).unwrap();
        assert!(((r.sigma0_trace - exact) / exact).abs() < 1e-6);
    }

    #[test]
    fn zero_eta_gives_zero_trace() {
        let model = LinearSdeModel::shipped_verification();
        let sched = StochasticitySchedule::constant(0.0, 1.0).unwrap();
        let r = propagate_lyapunov(&model, &sched, 256).unwrap();
        assert_eq!(r.sigma0_trace, 0.0);
    }

    #[test]
    fn shipped_model_closed_form() {
        // W(s) = s e^-s, eta = 1: integral = 1 - 2/e
        let model = LinearSdeModel::shipped_verification();
        let sched = StochasticitySchedule::constant(1.0, 1.0).unwrap();
        let r = propagate_lyapunov(&model, &sched, 1024).unwrap();
        let exact = 1.0 - 2.0 / E;
        assert!(
            ((r.sigma0_trace - exact) / exact).abs() < 1e-4,
            "{} vs {exact}",
            r.sigma0_trace
        );
    }

    #[test]
    fn weight_function_shapes() {
        let model = LinearSdeModel::shipped_verification();
        let (table, mono) = weight_function(&model, 256).unwrap();
        assert_eq!(mono, Monotonicity::IncreasingInS);
        // compare a few points against s e^-s
        for &(s, w) in table.iter().step_by(32) {
            let exact = s * (-s).exp();
            assert!((w - exact).abs() < 1e-6, "W({s}) = {w} vs {exact}");
        }

        let flat = LinearSdeModel::flat();
        let (table, mono) = weight_function(&flat, 64).unwrap();
        assert_eq!(mono, Monotonicity::Flat);
        assert!(table.iter().all(|&(_, w)| (w - 1.0).abs() < 1e-12));

        let zero_g = LinearSdeModel::new("zero g", 1, 1.0, |_| 0.5, |_| 0.0);
        let (table, _) = weight_function(&zero_g, 64).unwrap();
        assert!(table.iter().all(|&(_, w)| w == 0.0));

        let counter = LinearSdeModel::constant(1, 1.0, 1.0, 1.0);
        let (_, mono) = weight_function(&counter, 256).unwrap();
        assert_eq!(mono, Monotonicity::DecreasingInS);
    }

    #[test]
    fn linearity_in_eta_squared() {
        let model = LinearSdeModel::shipped_verification();
        let s1 = StochasticitySchedule::constant(0.7, 1.0).unwrap();
        let s2 = StochasticitySchedule::constant(0.7 * 2f64.sqrt(), 1.0).unwrap();
        let t1 = propagate_lyapunov(&model, &s1, 512).unwrap().sigma0_trace;
        let t2 = propagate_lyapunov(&model, &s2, 512).unwrap().sigma0_trace;
        assert!(((t2 - 2.0 * t1) / (2.0 * t1)).abs() < 1e-6);
    }

    #[test]
    fn free_bins_two_bin_hand_value() {
        let model = LinearSdeModel::shipped_verification();
        let (sched, trace) =
            optimize_allocation(&model, 1.0, 2, AllocationFamily::FreeBins).unwrap();
        // all budget in s in [0.5, 1]: 2(1.5 e^-0.5 - 2 e^-1)
        let exact = 2.0 * (1.5 * (-0.5f64).exp() - 2.0 / E);
        assert!(
            (trace - exact).abs() < 1e-3,
            "trace {trace} vs {exact}"
        );
        let bins = sched.bins.as_ref().unwrap();
        assert_eq!(bins[0].1, 0.0);
        assert!((bins[1].1 - 2f64.sqrt()).abs() < 1e-12);
        // budget conserved
        assert!((sched.budget() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn free_bins_optimum_beats_random_allocations() {
        let model = LinearSdeModel::shipped_verification();
        let k = 4;
        let (_, best) = optimize_allocation(&model, 1.0, k, AllocationFamily::FreeBins).unwrap();
        let integrals = bin_weight_integrals(&model, k, 1024);
        let mut rng = stream(17);
        for _ in 0..1000 {
            // random feasible eta^2 on the simplex
            let mut raw: Vec<f64> = (0..k)
                .map(|_| {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    x * x
                })
                .collect();
            let dt = 1.0 / k as f64;
            let total: f64 = raw.iter().map(|r| r * dt).sum();
            for r in raw.iter_mut() {
                *r /= total;
            }
            let obj: f64 = raw.iter().zip(&integrals).map(|(&e2, &wi)| e2 * wi).sum();
            assert!(obj <= best + 1e-9, "random allocation beat the optimum");
        }
    }

    #[test]
    fn flat_weight_ties() {
        let model = LinearSdeModel::flat();
        let (_, t_free) = optimize_allocation(&model, 1.0, 4, AllocationFamily::FreeBins).unwrap();
        let sched = StochasticitySchedule::constant(1.0, 1.0).unwrap();
        let t_const = propagate_lyapunov(&model, &sched, 1024).unwrap().sigma0_trace;
        assert!((t_free - t_const).abs() < 1e-6);
    }

    #[test]
    fn cosine_family_dominates_constant_when_weight_increasing() {
        let model = LinearSdeModel::shipped_verification();
        let budget = 1.0;
        let (_, best) = optimize_allocation(&model, budget, 8, AllocationFamily::CosineFamily).unwrap();
        let constant = StochasticitySchedule::constant(1.0, 1.0).unwrap();
        let t_const = propagate_lyapunov(&model, &constant, 1024).unwrap().sigma0_trace;
        assert!(best >= t_const - 1e-9, "cosine sweep {best} < constant {t_const}");
    }

    #[test]
    fn monte_carlo_agrees_with_lyapunov() {
        let model = LinearSdeModel::constant(1, 1.0, 1.0, 1.0);
        let sched = StochasticitySchedule::constant(1.0, 1.0).unwrap();
        let exact = (1.0 - E.powi(-2)) / 2.0;
        let (est, se) = monte_carlo_variance(&model, &sched, 2000, 400, 11).unwrap();
        assert!(
            (est - exact).abs() < 3.0 * se + 0.01 * exact,
            "estimate {est} +- {se} vs {exact}"
        );
        // eta = 0 -> exactly zero variance
        let zero = StochasticitySchedule::constant(0.0, 1.0).unwrap();
        let (est, _) = monte_carlo_variance(&model, &zero, 1000, 100, 1).unwrap();
        assert_eq!(est, 0.0);
    }

    #[test]
    fn monte_carlo_seed_consistency() {
        let model = LinearSdeModel::shipped_verification();
        let sched = StochasticitySchedule::constant(1.0, 1.0).unwrap();
        let (a, sa) = monte_carlo_variance(&model, &sched, 4000, 200, 1).unwrap();
        let (b, sb) = monte_carlo_variance(&model, &sched, 4000, 200, 2).unwrap();
        let pooled = (sa * sa + sb * sb).sqrt();
        assert!((a - b).abs() < 4.0 * pooled, "{a} vs {b} (pooled se {pooled})");
    }

    #[test]
    fn monte_carlo_flags_too_few_steps() {
        let model = LinearSdeModel::constant(1, 8.0, 1.0, 1.0);
        let sched = StochasticitySchedule::constant(1.0, 1.0).unwrap();
        assert!(monte_carlo_variance(&model, &sched, 1000, 10, 0).is_err());
        assert!(monte_carlo_variance(&model, &sched, 100, 400, 0).is_err());
    }

    #[test]
    fn optimality_reports() {
        let shipped = LinearSdeModel::shipped_verification();
        let rep = verify_decreasing_optimality(&shipped, 1.0, 8).unwrap();
        assert_eq!(rep.status, OptimalityStatus::Holds);
        assert_eq!(rep.free_bins_optimum_decaying, Some(true));
        assert_eq!(rep.monotone_dominates_mirror, Some(true));
        let (c, k, r) = rep.cosine_ordering.unwrap();
        assert!(c > k && k > r);

        let flat = LinearSdeModel::flat();
        let rep = verify_decreasing_optimality(&flat, 1.0, 8).unwrap();
        assert_eq!(rep.status, OptimalityStatus::Flat);

        let counter = LinearSdeModel::constant(1, 1.0, 1.0, 1.0);
        let rep = verify_decreasing_optimality(&counter, 1.0, 8).unwrap();
        assert!(matches!(rep.status, OptimalityStatus::Inapplicable(_)));
    }

    #[test]
    fn budget_sensitivity_cross_check() {
        // Tr(Sigma_0) equals the quadrature of eta^2 W directly.
        let model = LinearSdeModel::shipped_verification();
        let sched = StochasticitySchedule::cosine_decay(0.2, 1.0, 1.0).unwrap();
        let via_prop = propagate_lyapunov(&model, &sched, 1024).unwrap().sigma0_trace;
        let f = |s: f64| {
            let e = sched.eta_at(s).unwrap();
            e * e * s * (-s).exp()
        };
        let direct = crate::numeric::adaptive_simpson(&f, 0.0, 1.0, 1e-10);
        assert!(
            ((via_prop - direct) / direct).abs() < 1e-4,
            "{via_prop} vs {direct}"
        );
    }
}
