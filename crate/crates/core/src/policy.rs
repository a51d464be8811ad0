//! Piecewise-constant vaccination schedules and the policy bundle
//! `pi_t(k) = xi(k) * pi_t`.

use crate::degree::Xi;
use crate::error::{Error, Result};

/// Piecewise-constant `pi_t` on `[0, horizon]`.
///
/// Segment `i` covers `[starts[i], starts[i+1])`; the last one runs to the
/// horizon inclusive. `starts[0] == 0` and `starts` is strictly increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    starts: Vec<f64>,
    values: Vec<f64>,
    horizon: f64,
}

impl Schedule {
    pub fn new(starts: Vec<f64>, values: Vec<f64>, horizon: f64) -> Result<Self> {
        if starts.is_empty() || starts.len() != values.len() {
            return Err(Error::param("schedule", "need one value per segment"));
        }
        if starts[0] != 0.0 {
            return Err(Error::param("schedule", "first segment must start at 0"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::param("horizon", format!("must be > 0, got {horizon}")));
        }
        for w in starts.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::param("schedule", "breakpoints must be strictly increasing"));
            }
        }
        if *starts.last().unwrap() >= horizon && starts.len() > 1 {
            return Err(Error::param("schedule", "breakpoints must lie inside [0, T)"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::param("schedule", "values must be finite and >= 0"));
        }
        Ok(Self {
            starts,
            values,
            horizon,
        })
    }

    pub fn constant(value: f64, horizon: f64) -> Result<Self> {
        Self::new(vec![0.0], vec![value], horizon)
    }

    /// `nu * 1[0, tau)`; `tau <= 0` gives no vaccination, `tau >= T` full-time.
    pub fn threshold(tau: f64, nu: f64, horizon: f64) -> Result<Self> {
        if tau.is_nan() {
            return Err(Error::param("tau", "NaN"));
        }
        if tau <= 0.0 || nu == 0.0 {
            Self::constant(0.0, horizon)
        } else if tau >= horizon {
            Self::constant(nu, horizon)
        } else {
            Self::new(vec![0.0, tau], vec![nu, 0.0], horizon)
        }
    }

    /// One value per step of a uniform grid with `values.len()` steps.
    /// Adjacent equal values are merged.
    pub fn from_steps(values: &[f64], horizon: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::param("schedule", "empty step list"));
        }
        let dt = horizon / values.len() as f64;
        let mut starts = vec![0.0];
        let mut vals = vec![values[0]];
        for (i, &v) in values.iter().enumerate().skip(1) {
            if v != *vals.last().unwrap() {
                starts.push(i as f64 * dt);
                vals.push(v);
            }
        }
        Self::new(starts, vals, horizon)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn starts(&self) -> &[f64] {
        &self.starts
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    fn segment(&self, t: f64) -> usize {
        self.starts.partition_point(|&s| s <= t).saturating_sub(1)
    }

    pub fn value(&self, t: f64) -> f64 {
        self.values[self.segment(t)]
    }

    /// First breakpoint strictly after `t`, if any.
    pub fn next_break(&self, t: f64) -> Option<f64> {
        self.starts.get(self.segment(t) + 1).copied().filter(|&s| s > t)
    }

    /// True when the schedule is zero on `[t, horizon]`.
    pub fn is_zero_from(&self, t: f64) -> bool {
        self.values[self.segment(t)..].iter().all(|&v| v == 0.0)
    }

    pub fn integral(&self, a: f64, b: f64) -> f64 {
        let mut total = 0.0;
        for (i, &v) in self.values.iter().enumerate() {
            let lo = self.starts[i].max(a);
            let hi = self.starts.get(i + 1).copied().unwrap_or(self.horizon).min(b);
            if hi > lo {
                total += v * (hi - lo);
            }
        }
        total
    }

    pub fn check_bound(&self, nu: f64) -> Result<()> {
        if self.max_value() > nu * (1.0 + 1e-12) {
            return Err(Error::param(
                "schedule",
                format!("value {} exceeds nu = {nu}", self.max_value()),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaccinationPolicy {
    pub xi: Xi,
    pub schedule: Schedule,
}

impl VaccinationPolicy {
    pub fn new(xi: Xi, schedule: Schedule) -> Self {
        Self { xi, schedule }
    }

    pub fn threshold(xi: Xi, tau: f64, nu: f64, horizon: f64) -> Result<Self> {
        Ok(Self::new(xi, Schedule::threshold(tau, nu, horizon)?))
    }

    pub fn none(xi: Xi, horizon: f64) -> Result<Self> {
        Ok(Self::new(xi, Schedule::constant(0.0, horizon)?))
    }
}
