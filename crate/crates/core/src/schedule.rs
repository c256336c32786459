//! Interpolant schedules and the integration time grid.
//!
//! A schedule is the coefficient pair (kappa_t, omega_t) of the conditional
//! path `X_t = kappa_t X_0 + omega_t X_1`, pinned so that kappa_0 = omega_1 = 1
//! and kappa_1 = omega_0 = 0. The linear schedule is the default and the only
//! one shipped; the abstraction keeps the score transform and the memoryless
//! noise level generic in (kappa, omega).

use crate::error::{Error, Result};

/// Lower integration clamp: score and drift evaluations never go below this.
pub const T_MIN: f64 = 1e-3;
/// Upper integration clamp: evaluations never exceed `1 - EPS_CLAMP`.
pub const EPS_CLAMP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Linear,
}

impl Schedule {
    pub fn kappa(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => 1.0 - t,
        }
    }

    pub fn omega(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => t,
        }
    }

    pub fn kappa_dot(self, _t: f64) -> f64 {
        match self {
            Schedule::Linear => -1.0,
        }
    }

    pub fn omega_dot(self, _t: f64) -> f64 {
        match self {
            Schedule::Linear => 1.0,
        }
    }

    /// The `omega_dot/omega` coefficient of the memoryless SDE drift.
    /// Singular at t = 0 for the linear schedule.
    pub fn drift_coeff(self, t: f64) -> Result<f64> {
        let omega = self.omega(t);
        if omega.abs() < 1e-300 {
            return Err(Error::TimeOutOfRange {
                t,
                lo: T_MIN,
                hi: 1.0,
            });
        }
        Ok(self.omega_dot(t) / omega)
    }

    /// Memoryless noise level
    /// `sigma(t) = sqrt(2 kappa_t (omega_dot/omega * kappa_t - kappa_dot))`.
    /// For the linear schedule this is `sqrt(2 (1 - t) / t)`.
    pub fn memoryless_sigma(self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::TimeOutOfRange { t, lo: T_MIN, hi: 1.0 });
        }
        let k = self.kappa(t);
        let inner = self.drift_coeff(t)? * k - self.kappa_dot(t);
        Ok((2.0 * k * inner).max(0.0).sqrt())
    }

    /// Denominator of the score transform:
    /// `kappa_t (omega_dot/omega * kappa_t - kappa_dot)`, equal to
    /// `sigma(t)^2 / 2`.
    pub fn score_denominator(self, t: f64) -> Result<f64> {
        let k = self.kappa(t);
        Ok(k * (self.drift_coeff(t)? * k - self.kappa_dot(t)))
    }

    pub fn tag(self) -> u8 {
        match self {
            Schedule::Linear => 0,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Schedule::Linear),
            other => Err(Error::Format(format!("unknown schedule tag {other}"))),
        }
    }

    /// Boundary identities kappa(0)=1, kappa(1)=0, omega(0)=0, omega(1)=1.
    pub fn validate_boundaries(self, tol: f64) -> Result<()> {
        let checks = [
            (self.kappa(0.0) - 1.0, "kappa(0)"),
            (self.kappa(1.0), "kappa(1)"),
            (self.omega(0.0), "omega(0)"),
            (self.omega(1.0) - 1.0, "omega(1)"),
        ];
        for (err, name) in checks {
            if err.abs() > tol {
                return Err(Error::config(format!(
                    "schedule boundary violated: {name} off by {err:e}"
                )));
            }
        }
        Ok(())
    }

    /// Derivative functions must match central differences of kappa/omega.
    pub fn validate_derivatives(self, tol: f64) -> Result<()> {
        let h = 1e-6;
        let mut t = 0.05;
        while t < 0.999 {
            let dk = (self.kappa(t + h) - self.kappa(t - h)) / (2.0 * h);
            let dw = (self.omega(t + h) - self.omega(t - h)) / (2.0 * h);
            if (dk - self.kappa_dot(t)).abs() > tol || (dw - self.omega_dot(t)).abs() > tol {
                return Err(Error::config(format!(
                    "schedule derivatives deviate from finite differences at t={t}"
                )));
            }
            t += 0.05;
        }
        Ok(())
    }
}

/// Uniform time grid over [0, 1] with clamped evaluation times.
///
/// States are stored at `t_j = j h`; drift, noise, and score evaluations use
/// `eval_t(j)`, clamped into `[max(T_MIN, h), 1 - EPS_CLAMP]`. Flooring the
/// lower end at `h` keeps `h * omega_dot/omega <= 1` for the linear schedule,
/// so the Euler step stays stable near t = 0. The last transition uses the
/// deterministic flow drift only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub steps: usize,
    pub h: f64,
}

impl TimeGrid {
    pub fn from_steps(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("time grid needs at least one step"));
        }
        Ok(TimeGrid {
            steps,
            h: 1.0 / steps as f64,
        })
    }

    /// Build from a step size that must divide 1 into a whole number of steps.
    pub fn from_h(h: f64) -> Result<Self> {
        if !(h > 0.0 && h <= 1.0) {
            return Err(Error::config(format!("invalid step size {h}")));
        }
        let steps = (1.0 / h).round() as usize;
        if ((steps as f64) * h - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "step size {h} does not divide the unit interval"
            )));
        }
        Ok(TimeGrid {
            steps,
            h: 1.0 / steps as f64,
        })
    }

    pub fn t(&self, j: usize) -> f64 {
        if j == self.steps {
            1.0
        } else {
            j as f64 * self.h
        }
    }

    /// Clamped evaluation time for step `j`.
    pub fn eval_t(&self, j: usize) -> f64 {
        let lo = T_MIN.max(self.h);
        let hi = 1.0 - EPS_CLAMP;
        self.t(j).clamp(lo, hi)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|j| self.t(j)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_boundaries_hold_exactly() {
        let s = Schedule::Linear;
        s.validate_boundaries(0.0).unwrap();
        s.validate_derivatives(1e-6).unwrap();
    }

    #[test]
    fn memoryless_sigma_linear_values() {
        let s = Schedule::Linear;
        // sigma(t) = sqrt(2 (1 - t) / t)
        assert!((s.memoryless_sigma(0.5).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert!((s.memoryless_sigma(0.8).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(s.memoryless_sigma(1.0).unwrap().abs() < 1e-12);
        assert!(s.memoryless_sigma(0.0).is_err());
    }

    #[test]
    fn sigma_matches_score_denominator() {
        let s = Schedule::Linear;
        for &t in &[0.1, 0.3, 0.5, 0.9, 0.999] {
            let sigma = s.memoryless_sigma(t).unwrap();
            let denom = s.score_denominator(t).unwrap();
            assert!((sigma * sigma - 2.0 * denom).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_times_are_strictly_increasing_from_zero_to_one() {
        let g = TimeGrid::from_steps(50).unwrap();
        let ts = g.times();
        assert_eq!(ts[0], 0.0);
        assert_eq!(*ts.last().unwrap(), 1.0);
        assert!(ts.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn eval_times_are_clamped() {
        let g = TimeGrid::from_steps(100).unwrap();
        assert_eq!(g.eval_t(0), 0.01); // floored at h
        assert_eq!(g.eval_t(100), 1.0 - EPS_CLAMP);
        assert_eq!(g.eval_t(50), 0.5);
    }

    #[test]
    fn bad_step_sizes_are_rejected
    () {
        assert!(TimeGrid::from_h(0.3).is_err());
        assert!(TimeGrid::from_h(0.02).is_ok());
    }
}
