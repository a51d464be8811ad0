//! Epidemic threshold and final sizes under `nu * 1[0, tau)` vaccination
//! with `xi(k) = k`.
//!
//! With transmissibility `T = r / (r + gamma)` and `z = e^(-tau nu)`:
//!
//! ```text
//! alpha_inf = 1 - T + T psi'(alpha_inf z) / psi'(1)
//! S_inf     = S0 psi(alpha_inf z)
//! V_inf     = lambda(tau) (S0 - S_tau)
//! R_inf     = 1 - S_inf - V_inf
//! ```
//!
//! where `lambda(tau)` is the share of the vaccination clock in the race
//! against infection over `[0, tau]`.

use std::io::Write;

use crate::degree::DegreeDistribution;
use crate::error::{Error, Result};
use crate::fluid::{EpidemicParams, Trajectory};

pub const FIXED_POINT_TOL: f64 = 1e-12;
pub const MAX_ITERATIONS: usize = 10_000;
const DAMPING: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpidemicIndicators {
    pub r0: f64,
    pub transmissibility: f64,
    /// `r (psi''(1)/psi'(1) - 1) - gamma`; positive iff supercritical.
    pub margin: f64,
    pub supercritical: bool,
}

impl EpidemicIndicators {
    pub const CSV_HEADER: &'static str = "label,r,gamma,R0,margin,supercritical";

    pub fn csv_row(&self, label: &str, r: f64, gamma: f64) -> String {
        format!(
            "{label},{r},{gamma},{},{},{}",
            self.r0, self.margin, self.supercritical
        )
    }
}

pub fn r0(dist: &DegreeDistribution, r: f64, gamma: f64) -> Result<EpidemicIndicators> {
    if !(r >= 0.0 && gamma >= 0.0 && r + gamma > 0.0) {
        return Err(Error::param("r + gamma", "rates must be >= 0 with a positive sum"));
    }
    let m1 = dist.factorial_moment(1);
    if m1 <= 0.0 {
        return Err(Error::param("dist", "psi'(1) = 0"));
    }
    let ratio = dist.factorial_moment(2) / m1;
    let t = r / (r + gamma);
    let r0 = t * ratio;
    Ok(EpidemicIndicators {
        r0,
        transmissibility: t,
        margin: r * (ratio - 1.0) - gamma,
        supercritical: r0 > 1.0,
    })
}

struct FixedPointMap<'a> {
    dist: &'a DegreeDistribution,
    t: f64,
    z: f64,
    m1: f64,
}

impl FixedPointMap<'_> {
    fn new<'a>(dist: &'a DegreeDistribution, r: f64, gamma: f64, tau: f64, nu: f64) -> Result<FixedPointMap<'a>> {
        if !(r >= 0.0 && gamma >= 0.0 && r + gamma > 0.0) {
            return Err(Error::param("r + gamma", "rates must be >= 0 with a positive sum"));
        }
        if !(tau >= 0.0 && nu >= 0.0) {
            return Err(Error::param("tau, nu", "must be >= 0"));
        }
        Ok(FixedPointMap {
            dist,
            t: r / (r + gamma),
            z: (-tau * nu).exp(),
            m1: dist.factorial_moment(1),
        })
    }

    fn apply(&self, alpha: f64) -> f64 {
        1.0 - self.t + self.t * self.dist.psi_unchecked(alpha * self.z, 1) / self.m1
    }
}

/// Smallest fixed point by damped iteration from zero; falls back to
/// [`alpha_infinity_bisect`] when the iteration stalls near criticality.
pub fn alpha_infinity(dist: &DegreeDistribution, r: f64, gamma: f64, tau: f64, nu: f64) -> Result<f64> {
    let map = FixedPointMap::new(dist, r, gamma, tau, nu)?;
    if map.t == 0.0 {
        return Ok(1.0);
    }
    let mut alpha = 0.0;
    for _ in 0..MAX_ITERATIONS {
        let next = (1.0 - DAMPING) * alpha + DAMPING * map.apply(alpha);
        if (next - alpha).abs() < FIXED_POINT_TOL {
            return Ok(next);
        }
        alpha = next;
    }
    alpha_infinity_bisect(dist, r, gamma, tau, nu)
}

/// Smallest root of `F(alpha) - alpha` on `[0, 1]` by bracketing and bisection.
pub fn alpha_infinity_bisect(dist: &DegreeDistribution, r: f64, gamma: f64, tau: f64, nu: f64) -> Result<f64> {
    let map = FixedPointMap::new(dist, r, gamma, tau, nu)?;
    let h = |a: f64| map.apply(a) - a;
    if h(0.0) <= 0.0 {
        return Ok(0.0);
    }
    // F is convex and increasing, so the first sign change brackets the smallest root
    let grid = 4096;
    let mut lo = 0.0;
    let mut hi = None;
    for j in 1..=grid {
        let x = j as f64 / grid as f64;
        if h(x) <= 0.0 {
            hi = Some(x);
            break;
        }
        lo = x;
    }
    let Some(mut hi) = hi else {
        return Err(Error::NoConvergence {
            what: "alpha_inf: no root bracketed in [0, 1]".into(),
            iterations: grid,
        });
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if h(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `|alpha - F(alpha)|`.
pub fn fixed_point_residual(dist: &DegreeDistribution, r: f64, gamma: f64, tau: f64, nu: f64, alpha: f64) -> Result<f64> {
    let map = FixedPointMap::new(dist, r, gamma, tau, nu)?;
    Ok((alpha - map.apply(alpha)).abs())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinalSizes {
    pub tau: f64,
    pub nu: f64,
    pub alpha_inf: f64,
    pub lambda: f64,
    pub s_inf: f64,
    pub v_inf: f64,
    pub r_inf: f64,
    /// `S0 - S_inf + lambda (S0 psi(theta_tau alpha_tau) - 1)`, kept for comparison.
    pub r_inf_alt: f64,
}

impl FinalSizes {
    pub const CSV_HEADER: &'static str = "tau,nu,alpha_inf,lambda,S_inf,V_inf,R_inf";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.tau, self.nu, self.alpha_inf, self.lambda, self.s_inf, self.v_inf, self.r_inf
        )
    }
}

/// Linear interpolation of a grid quantity at time `t`.
fn interp(tr: &Trajectory, t: f64, f: impl Fn(usize) -> f64) -> f64 {
    let i = tr.index_at(t);
    if i + 1 >= tr.len() {
        return f(i);
    }
    let w = (t - tr.t[i]) / (tr.t[i + 1] - tr.t[i]);
    (1.0 - w) * f(i) + w * f(i + 1)
}

/// `int_0^tau nu / int_0^tau (nu + r pI)` by the trapezoid rule; zero at `tau = 0`.
pub fn lambda_tau(tr: &Trajectory, r: f64, tau: f64, nu: f64) -> Result<f64> {
    if tau > tr.horizon() * (1.0 + 1e-12) {
        return Err(Error::param(
            "tau",
            format!("{tau} beyond trajectory horizon {}", tr.horizon()),
        ));
    }
    if tau <= 0.0 || nu == 0.0 {
        return Ok(0.0);
    }
    let p_inf = |i: usize| tr.states[i].pi;
    let mut infect = 0.0;
    let end = tr.index_at(tau);
    for i in 0..end {
        infect += 0.5 * (tr.t[i + 1] - tr.t[i]) * (p_inf(i) + p_inf(i + 1));
    }
    if tau > tr.t[end] {
        let p_tau = interp(tr, tau, p_inf);
        infect += 0.5 * (tau - tr.t[end]) * (p_inf(end) + p_tau);
    }
    let vacc = nu * tau;
    Ok(vacc / (vacc + r * infect))
}

/// Final sizes for `nu * 1[0, tau)`; `traj` must come from the same
/// parameters with `xi(k) = k` and cover `[0, tau]`.
pub fn final_sizes(
    dist: &DegreeDistribution,
    params: &EpidemicParams,
    tau: f64,
    nu: f64,
    traj: &Trajectory,
) -> Result<FinalSizes> {
    let lambda = lambda_tau(traj, params.r, tau, nu)?;
    let alpha_inf = alpha_infinity(dist, params.r, params.gamma, tau, nu)?;
    let s0 = params.s0();
    let z = (-tau * nu).exp();
    let s_inf = s0 * dist.psi_unchecked(alpha_inf * z, 0);
    let s_tau = interp(traj, tau, |i| traj.s[i]);
    let v_inf = lambda * (s0 - s_tau);
    Ok(FinalSizes {
        tau,
        nu,
        alpha_inf,
        lambda,
        s_inf,
        v_inf,
        r_inf: 1.0 - s_inf - v_inf,
        r_inf_alt: s0 - s_inf + lambda * (s_tau - 1.0),
    })
}

pub fn write_final_sizes<W: Write>(mut w: W, rows: &[FinalSizes]) -> std::io::Result<()> {
    writeln!(w, "{}", FinalSizes::CSV_HEADER)?;
    for row in rows {
        writeln!(w, "{}", row.csv_row())?;
    }
    Ok(())
}
