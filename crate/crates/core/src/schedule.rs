//! Stochasticity schedules η(t) for the reverse SDE sampler.
//!
//! Time runs with generation: t = T_max is the start (pure noise), t = 0 the
//! end (data). A schedule that decays *along generation order* is therefore
//! non-decreasing in t.

use crate::numeric::adaptive_simpson;
use crate::{CoreError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// η(t) = eta_max everywhere.
    Constant,
    /// η(t) = eta_min + (eta_max - eta_min) · t / T_max.
    LinearDecay,
    /// η(t) = eta_min + ½(eta_max − eta_min)(1 + cos(π(T_max − t)/T_max)).
    /// Decays from eta_max at t = T_max to eta_min at t = 0.
    CosineDecay,
    /// Time-mirror of `CosineDecay`: η(t) = cosine value at T_max − t.
    /// Noise concentrates *late* in generation; used as a control.
    ReversedCosine,
    /// η constant on each bin; bins are half-open `[lo, hi)` except the last.
    PiecewiseConstant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticitySchedule {
    pub kind: ScheduleKind,
    pub eta_min: f64,
    pub eta_max: f64,
    pub t_max: f64,
    /// Only for `PiecewiseConstant`: `((lo, hi), eta)` per bin.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<Vec<((f64, f64), f64)>>,
}

impl StochasticitySchedule {
    pub fn constant(eta: f64, t_max: f64) -> Result<Self> {
        Self::new(ScheduleKind::Constant, eta, eta, t_max, None)
    }

    pub fn linear_decay(eta_min: f64, eta_max: f64, t_max: f64) -> Result<Self> {
        Self::new(ScheduleKind::LinearDecay, eta_min, eta_max, t_max, None)
    }

    pub fn cosine_decay(eta_min: f64, eta_max: f64, t_max: f64) -> Result<Self> {
        Self::new(ScheduleKind::CosineDecay, eta_min, eta_max, t_max, None)
    }

    pub fn reversed_cosine(eta_min: f64, eta_max: f64, t_max: f64) -> Result<Self> {
        Self::new(ScheduleKind::ReversedCosine, eta_min, eta_max, t_max, None)
    }

    /// Piecewise-constant schedule. Bins must tile `[0, t_max]` in order.
    pub fn piecewise(bins: Vec<((f64, f64), f64)>, t_max: f64) -> Result<Self> {
        if bins.is_empty() {
            return Err(CoreError::InvalidSchedule("no bins".into()));
        }
        let mut lo = 0.0;
        for &((a, b), eta) in &bins {
            if (a - lo).abs() > 1e-12 || b <= a {
                return Err(CoreError::InvalidSchedule(format!(
                    "bins must tile [0, {t_max}] in order; got bin [{a}, {b}] after {lo}"
                )));
            }
            if eta < 0.0 || !eta.is_finite() {
                return Err(CoreError::InvalidSchedule(format!("bin eta {eta} invalid")));
            }
            lo = b;
        }
        if (lo - t_max).abs() > 1e-12 {
            return Err(CoreError::InvalidSchedule(format!(
                "bins end at {lo}, expected {t_max}"
            )));
        }
        let etas: Vec<f64> = bins.iter().map(|b| b.1).collect();
        let eta_min = etas.iter().cloned().fold(f64::INFINITY, f64::min);
        let eta_max = etas.iter().cloned().fold(0.0, f64::max);
        Self::new(
            ScheduleKind::PiecewiseConstant,
            eta_min,
            eta_max,
            t_max,
            Some(bins),
        )
    }

    fn new(
        kind: ScheduleKind,
        eta_min: f64,
        eta_max: f64,
        t_max: f64,
        bins: Option<Vec<((f64, f64), f64)>>,
    ) -> Result<Self> {
        if !(eta_min >= 0.0 && eta_min.is_finite()) {
            return Err(CoreError::InvalidSchedule(format!("eta_min {eta_min} < 0")));
        }
        if !(eta_max >= eta_min && eta_max.is_finite()) {
            return Err(CoreError::InvalidSchedule(format!(
                "eta_max {eta_max} < eta_min {eta_min}"
            )));
        }
        if !(t_max > 0.0 && t_max.is_finite()) {
            return Err(CoreError::InvalidSchedule(format!("t_max {t_max} <= 0")));
        }
        Ok(Self {
            kind,
            eta_min,
            eta_max,
            t_max,
            bins,
        })
    }

    /// η(t). Errors if `t` lies outside `[0, t_max]`.
    pub fn eta_at(&self, t: f64) -> Result<f64> {
        if !(0.0..=self.t_max).contains(&t) {
            return Err(CoreError::TimeOutOfRange {
                t,
                lo: 0.0,
                hi: self.t_max,
            });
        }
        Ok(match self.kind {
            ScheduleKind::Constant => self.eta_max,
            ScheduleKind::LinearDecay => {
                self.eta_min + (self.eta_max - self.eta_min) * t / self.t_max
            }
            ScheduleKind::CosineDecay => self.cosine_value(t),
            ScheduleKind::ReversedCosine => self.cosine_value(self.t_max - t),
            ScheduleKind::PiecewiseConstant => {
                let bins = self.bins.as_ref().expect("piecewise bins");
                let mut eta = bins.last().expect("nonempty").1;
                for &((lo, hi), e) in bins {
                    if t >= lo && t < hi {
                        eta = e;
                        break;
                    }
                }
                eta
            }
        })
    }

    fn cosine_value(&self, t: f64) -> f64 {
        // Endpoints are part of the contract; return them exactly rather than
        // through cos(π) roundoff.
        if t == 0.0 {
            return self.eta_min;
        }
        if t == self.t_max {
            return self.eta_max;
        }
        let phase = std::f64::consts::PI * (self.t_max - t) / self.t_max;
        self.eta_min + 0.5 * (self.eta_max - self.eta_min) * (1.0 + phase.cos())
    }

    /// Total stochasticity budget ∫₀^{T_max} η(t)² dt.
    ///
    /// Piecewise bins are summed exactly; smooth kinds use adaptive
    /// quadrature to well below 1e-6 relative error.
    pub fn budget(&self) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.eta_max * self.eta_max * self.t_max,
            ScheduleKind::PiecewiseConstant => self
                .bins
                .as_ref()
                .expect("piecewise bins")
                .iter()
                .map(|&((lo, hi), eta)| eta * eta * (hi - lo))
                .sum(),
            _ => {
                let f = |t: f64| {
                    let e = self.eta_at(t).expect("t within range");
                    e * e
                };
                adaptive_simpson(&f, 0.0, self.t_max, 1e-10 * self.t_max.max(1.0))
            }
        }
    }

    /// Closed-form budget of a cosine-decay schedule with these parameters:
    /// T·[(a+b)² + b²/2] with a = eta_min, b = (eta_max − eta_min)/2.
    pub fn cosine_budget_closed_form(eta_min: f64, eta_max: f64, t_max: f64) -> f64 {
        let a = eta_min;
        let b = 0.5 * (eta_max - eta_min);
        t_max * ((a + b) * (a + b) + 0.5 * b * b)
    }

    /// The cosine-decay member with the given `eta_min` whose budget equals
    /// `budget`. Returns an error when no `eta_max >= eta_min` attains it.
    pub fn cosine_with_budget(eta_min: f64, budget: f64, t_max: f64) -> Result<Self> {
        let a = eta_min;
        // Solve (a+b)^2 + b^2/2 = budget/t_max for b >= 0.
        let disc = 6.0 * budget / t_max - 2.0 * a * a;
        if disc < 0.0 {
            return Err(CoreError::InvalidSchedule(format!(
                "budget {budget} infeasible for eta_min {eta_min}"
            )));
        }
        let b = (-2.0 * a + disc.sqrt()) / 3.0;
        if b < 0.0 {
            return Err(CoreError::InvalidSchedule(format!(
                "eta_min {eta_min} exceeds the constant schedule for budget {budget}"
            )));
        }
        Self::cosine_decay(a, a + 2.0 * b, t_max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoint_identities() {
        let s = StochasticitySchedule::cosine_decay(0.0, 1.0, 1.0).unwrap();
        assert_eq!(s.eta_at(1.0).unwrap(), 1.0);
        assert_eq!(s.eta_at(0.0).unwrap(), 0.0);
        assert!((s.eta_at(0.5).unwrap() - 0.5).abs() < 1e-15);

        let s = StochasticitySchedule::cosine_decay(0.2, 0.9, 2.5).unwrap();
        assert_eq!(s.eta_at(2.5).unwrap(), 0.9);
        assert_eq!(s.eta_at(0.0).unwrap(), 0.2);
        assert!((s.eta_at(1.25).unwrap() - 0.55).abs() < 1e-12);
    }

    #[test]
    fn cosine_monotone_in_t() {
        let s = StochasticitySchedule::cosine_decay(0.1, 1.0, 1.0).unwrap();
        let mut prev = -1.0;
        for k in 0..=200 {
            let t = k as f64 / 200.0;
            let e = s.eta_at(t).unwrap();
            assert!(e >= prev - 1e-12, "not monotone at t={t}");
            prev = e;
        }
    }

    #[test]
    fn budget_closed_forms() {
        let s = StochasticitySchedule::constant(1.0, 1.0).unwrap();
        assert!((s.budget() - 1.0).abs() < 1e-12);

        // eta^2 = 2 on [0.5, 1], 0 elsewhere -> budget 1.
        let s = StochasticitySchedule::piecewise(
            vec![((0.0, 0.5), 0.0), ((0.5, 1.0), 2.0f64.sqrt())],
            1.0,
        )
        .unwrap();
        assert!((s.budget() - 1.0).abs() < 1e-12);

        // cosine(0, 1) on [0, 1] -> 3/8.
        let s = StochasticitySchedule::cosine_decay(0.0, 1.0, 1.0).unwrap();
        assert!((s.budget() - 0.375).abs() < 1e-7);
        assert!(
            (StochasticitySchedule::cosine_budget_closed_form(0.0, 1.0, 1.0) - 0.375).abs()
                < 1e-15
        );

        // general closed form vs quadrature
        let s = StochasticitySchedule::cosine_decay(0.3, 0.8, 2.0).unwrap();
        let cf = StochasticitySchedule::cosine_budget_closed_form(0.3, 0.8, 2.0);
        assert!((s.budget() - cf).abs() / cf < 1e-9);
    }

    #[test]
    fn cosine_with_budget_matches() {
        let s = StochasticitySchedule::cosine_with_budget(0.1, 0.375, 1.0).unwrap();
        assert!((s.budget() - 0.375).abs() < 1e-7);
        assert_eq!(s.eta_min, 0.1);
        // eta_min = eta_max member reduces to the constant schedule
        let c = StochasticitySchedule::cosine_with_budget(0.375f64.sqrt(), 0.375, 1.0).unwrap();
        assert!((c.eta_max - c.eta_min).abs() < 1e-9);
    }

    #[test]
    fn reversed_cosine_mirrors() {
        let s = StochasticitySchedule::cosine_decay(0.0, 1.0, 1.0).unwrap();
        let r = StochasticitySchedule::reversed_cosine(0.0, 1.0, 1.0).unwrap();
        for k in 0..=20 {
            let t = k as f64 / 20.0;
            let a = s.eta_at(t).unwrap();
            let b = r.eta_at(1.0 - t).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
        assert!((s.budget() - r.budget()).abs() < 1e-9);
    }

    #[test]
    fn out_of_range_rejected() {
        let s = StochasticitySchedule::constant(1.0, 1.0).unwrap();
        assert!(s.eta_at(-0.1).is_err());
        assert!(s.eta_at(1.1).is_err());
    }

    #[test]
    fn piecewise_must_tile() {
        assert!(StochasticitySchedule::piecewise(vec![((0.0, 0.4), 1.0)], 1.0).is_err());
        assert!(StochasticitySchedule::piecewise(
            vec![((0.0, 0.6), 1.0), ((0.5, 1.0), 1.0)],
            1.0
        )
        .is_err());
    }
}
