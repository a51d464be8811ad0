//! Vaccination cost functionals and the three optimization procedures:
//! threshold grid search on the social cost, the per-degree HJB best
//! response, and the Pontryagin forward-backward sweep.
//!
//! Running cost: `L1 = c_I I + c_V pi S`.

use std::io::Write;

use rayon::prelude::*;

use crate::degree::{DegreeDistribution, Xi};
use crate::error::{Error, Result};
use crate::fluid::{initial_state, ClosedSystem, EpidemicParams, FluidState, Trajectory};
use crate::policy::Schedule;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostParams {
    pub c_i: f64,
    pub c_v: f64,
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("c_I", self.c_i), ("c_V", self.c_v)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::param(name, format!("must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Trapezoid rule on the trajectory grid with `pi` constant per step.
pub fn social_cost(traj: &Trajectory, schedule: &Schedule, costs: &CostParams) -> Result<f64> {
    costs.validate()?;
    let t_end = traj.horizon();
    if (schedule.horizon() - t_end).abs() > 1e-9 * t_end.max(1.0) {
        return Err(Error::param(
            "schedule",
            format!("horizon {} differs from trajectory horizon {t_end}", schedule.horizon()),
        ));
    }
    let mut total = 0.0;
    for n in 0..traj.len() - 1 {
        let h = traj.t[n + 1] - traj.t[n];
        let pi = schedule.value(traj.t[n] + 0.5 * h);
        let infected = 0.5 * (traj.states[n].i + traj.states[n + 1].i);
        let suscept = 0.5 * (traj.s[n] + traj.s[n + 1]);
        total += h * (costs.c_i * infected + costs.c_v * pi * suscept);
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub taus: Vec<f64>,
    pub costs: Vec<f64>,
    /// Recovered and vaccinated fractions at the horizon.
    pub r_inf: Vec<f64>,
    pub v_inf: Vec<f64>,
    pub best: usize,
}

impl CostReport {
    pub const CSV_HEADER: &'static str = "tau,cost,R_inf,V_inf";

    pub fn tau_star(&self) -> f64 {
        self.taus[self.best]
    }

    pub fn cost_star(&self) -> f64 {
        self.costs[self.best]
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for j in 0..self.taus.len() {
            writeln!(w, "{},{},{},{}", self.taus[j], self.costs[j], self.r_inf[j], self.v_inf[j])?;
        }
        Ok(())
    }
}

/// Evaluates `C(tau)` for `nu * 1[0, tau)` on every grid point; ties go to the smaller `tau`.
pub fn optimize_threshold(
    dist: &DegreeDistribution,
    xi: &Xi,
    params: &EpidemicParams,
    costs: &CostParams,
    taus: &[f64],
) -> Result<CostReport> {
    costs.validate()?;
    if taus.is_empty() {
        return Err(Error::param("tau_grid", "empty"));
    }
    if taus.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::param("tau_grid", "must be sorted"));
    }
    if taus[0] < 0.0 || *taus.last().unwrap() > params.horizon + 1e-12 {
        return Err(Error::param("tau_grid", "must lie inside [0, T]"));
    }
    let sys = ClosedSystem::new(dist, xi, params)?;
    let x0 = initial_state(params)?;
    let rows: Vec<Result<(f64, f64, f64)>> = taus
        .par_iter()
        .map(|&tau| {
            let sched = Schedule::threshold(tau, params.nu, params.horizon)?;
            let tr = sys.solve(&x0, &sched, params.steps(), params.step())?;
            let cost = social_cost(&tr, &sched, costs)?;
            Ok((cost, tr.r(tr.len() - 1), tr.last().v))
        })
        .collect();
    let mut report = CostReport {
        taus: taus.to_vec(),
        costs: Vec::with_capacity(taus.len()),
        r_inf: Vec::with_capacity(taus.len()),
        v_inf: Vec::with_capacity(taus.len()),
        best: 0,
    };
    for row in rows {
        let (c, r, v) = row?;
        report.costs.push(c);
        report.r_inf.push(r);
        report.v_inf.push(v);
    }
    for (j, &c) in report.costs.iter().enumerate() {
        if c < report.costs[report.best] {
            report.best = j;
        }
    }
    Ok(report)
}

/// Uniform grid of `count` thresholds on `[0, T]`.
pub fn tau_grid(horizon: f64, count: usize) -> Vec<f64> {
    if count < 2 {
        return vec![0.0];
    }
    (0..count).map(|j| horizon * j as f64 / (count - 1) as f64).collect()
}

#[derive(Clone, Debug)]
pub struct BestResponseOptions {
    /// Keep the individual survival factor `theta~^xi(k)` in the value equation.
    pub theta_factor: bool,
    pub max_iter: usize,
}

impl Default for BestResponseOptions {
    fn default() -> Self {
        Self {
            theta_factor: true,
            max_iter: 50,
        }
    }
}

/// Individual value functions of a degree-`k` node against a fixed population.
#[derive(Clone, Debug)]
pub struct BestResponse {
    pub k: usize,
    pub t: Vec<f64>,
    pub j_s: Vec<f64>,
    pub j_i: Vec<f64>,
    /// Pointwise minimizer is `nu` (true) or `0`.
    pub vaccinate: Vec<bool>,
    /// Individual survival to vaccination under the chosen schedule.
    pub theta_tilde: Vec<f64>,
    pub tau_k: f64,
}

impl BestResponse {
    /// Number of changes of the pointwise minimizer along the grid.
    pub fn switches(&self) -> usize {
        self.vaccinate.windows(2).filter(|w| w[0] != w[1]).count()
    }

    /// True when the minimizer is `nu` on an initial segment and `0` afterwards.
    pub fn is_threshold(&self) -> bool {
        self.vaccinate.windows(2).all(|w| w[0] || !w[1])
    }
}

/// `J_I(t) = (c_I / gamma)(1 - e^{gamma (t - T)})`, or `c_I (T - t)` at `gamma = 0`.
pub fn j_infected(t: f64, horizon: f64, gamma: f64, c_i: f64) -> f64 {
    if gamma == 0.0 {
        c_i * (horizon - t)
    } else {
        c_i / gamma * (1.0 - (gamma * (t - horizon)).exp())
    }
}

/// Best response of a degree-`k` node to the population trajectory.
///
/// `J_S` solves, backward from `J_S(T) = 0`,
/// `-J_S' = nu theta~^xi(k) min(0, c_V - J_S) + r k pI (J_I - J_S)`.
/// With the survival factor enabled, `theta~` is recomputed from the chosen
/// schedule until the schedule stops changing.
pub fn best_response(
    k: usize,
    traj: &Trajectory,
    params: &EpidemicParams,
    costs: &CostParams,
    xi: &Xi,
    opts: &BestResponseOptions,
) -> Result<BestResponse> {
    costs.validate()?;
    let n = traj.len();
    let horizon = traj.horizon();
    let (r, gamma, nu) = (params.r, params.gamma, params.nu);
    let xk = xi.value(k);
    let kf = k as f64;
    let t = traj.t.clone();
    let j_i: Vec<f64> = t.iter().map(|&s| j_infected(s, horizon, gamma, costs.c_i)).collect();
    let p_inf: Vec<f64> = traj.states.iter().map(|x| x.pi).collect();

    let mut theta_tilde: Vec<f64> = vec![1.0; n];
    let mut vaccinate = vec![false; n];
    let mut j_s = vec![0.0; n];
    let rounds = if opts.theta_factor { opts.max_iter.max(1) } else { 1 };
    for round in 0..rounds {
        let weight = |idx: usize| {
            if opts.theta_factor {
                theta_tilde[idx].powf(xk)
            } else {
                1.0
            }
        };
        // backward RK4 in s = T - t; midpoint data by linear interpolation
        let rhs = |js: f64, p: f64, ji: f64, w: f64| {
            nu * w * (costs.c_v - js).min(0.0) + r * kf * p * (ji - js)
        };
        j_s[n - 1] = 0.0;
        for m in (0..n - 1).rev() {
            let h = t[m + 1] - t[m];
            let (p1, p0) = (p_inf[m + 1], p_inf[m]);
            let (w1, w0) = (weight(m + 1), weight(m));
            let ji_mid = j_infected(t[m] + 0.5 * h, horizon, gamma, costs.c_i);
            let (pm, wm) = (0.5 * (p0 + p1), 0.5 * (w0 + w1));
            let y = j_s[m + 1];
            let k1 = rhs(y, p1, j_i[m + 1], w1);
            let k2 = rhs(y + 0.5 * h * k1, pm, ji_mid, wm);
            let k3 = rhs(y + 0.5 * h * k2, pm, ji_mid, wm);
            let k4 = rhs(y + h * k3, p0, j_i[m], w0);
            j_s[m] = y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        let next: Vec<bool> = j_s.iter().map(|&v| v >= costs.c_v).collect();
        let stable = next == vaccinate && round > 0;
        vaccinate = next;
        if stable || !opts.theta_factor {
            break;
        }
        // theta~_t = exp(-int_0^t pi~), trapezoid on the grid
        theta_tilde[0] = 1.0;
        let mut acc = 0.0;
        for m in 1..n {
            let a = if vaccinate[m - 1] { nu } else { 0.0 };
            let b = if vaccinate[m] { nu } else { 0.0 };
            acc += 0.5 * (t[m] - t[m - 1]) * (a + b);
            theta_tilde[m] = (-acc).exp();
        }
    }

    let tau_k = match vaccinate.iter().rposition(|&v| v) {
        None => 0.0,
        Some(last) if last + 1 == n => horizon,
        Some(last) => {
            // linear interpolation of J_S - c_V between the last crossing pair
            let (a, b) = (j_s[last] - costs.c_v, j_s[last + 1] - costs.c_v);
            let w = if a == b { 0.0 } else { a / (a - b) };
            t[last] + w * (t[last + 1] - t[last])
        }
    };
    Ok(BestResponse {
        k,
        t,
        j_s,
        j_i,
        vaccinate,
        theta_tilde,
        tau_k,
    })
}

/// Switch times for each degree, evaluated in parallel.
pub fn br_thresholds(
    degrees: &[usize],
    traj: &Trajectory,
    params: &EpidemicParams,
    costs: &CostParams,
    xi: &Xi,
    opts: &BestResponseOptions,
) -> Result<Vec<BestResponse>> {
    degrees
        .par_iter()
        .map(|&k| best_response(k, traj, params, costs, xi, opts))
        .collect()
}

pub fn write_thresholds<W: Write>(mut w: W, responses: &[BestResponse]) -> std::io::Result<()> {
    writeln!(w, "k,tau_k")?;
    for b in responses {
        writeln!(w, "{},{}", b.k, b.tau_k)?;
    }
    Ok(())
}

/// `df/dx` of the closed system and `df/dpi`, at `x` under control `pi`.
pub fn closed_jacobian(sys: &ClosedSystem, x: &FluidState, pi: f64) -> ([[f64; 7]; 7], [f64; 7]) {
    let FluidState {
        alpha,
        theta,
        ps,
        pi: p_i,
        pv,
        ..
    } = *x;
    let (r, gamma) = (sys.r(), sys.gamma());
    let j = sys.g().jet(alpha, theta);
    let mut jac = [[0.0; 7]; 7];
    let mut f1 = [0.0; 7];

    jac[0][0] = -r * p_i;
    jac[0][5] = -r * alpha;
    jac[1][1] = -pi;
    f1[1] = -theta;
    jac[2][0] = r * p_i * (j.ga + alpha * j.gaa);
    jac[2][1] = r * p_i * alpha * j.gat;
    jac[2][2] = -gamma;
    jac[2][5] = r * alpha * j.ga;
    jac[3][0] = pi * theta * j.gat;
    jac[3][1] = pi * (j.gt + theta * j.gtt);
    f1[3] = theta * j.gt;

    if j.ga > f64::MIN_POSITIVE {
        let inv = 1.0 / j.ga;
        let a = alpha * j.gaa * inv;
        let b = theta * j.gat * inv;
        let a_alpha = j.gaa * inv + alpha * j.gaaa * inv - a * j.gaa * inv;
        let a_theta = alpha * j.gaat * inv - a * j.gat * inv;
        let b_alpha = theta * j.gaat * inv - b * j.gaa * inv;
        let b_theta = (j.gat + theta * j.gatt) * inv - b * j.gat * inv;

        jac[4][0] = -r * p_i * ps * a_alpha - pi * ps * b_alpha;
        jac[4][1] = -r * p_i * ps * a_theta - pi * ps * b_theta;
        jac[4][4] = r * p_i * (1.0 - a) - pi * b;
        jac[4][5] = r * ps * (1.0 - a);

        jac[5][0] = r * p_i * ps * a_alpha;
        jac[5][1] = r * p_i * ps * a_theta;
        jac[5][4] = r * p_i * a;
        jac[5][5] = -gamma + r * ps * a - r + 2.0 * r * p_i;

        jac[6][0] = pi * ps * b_alpha;
        jac[6][1] = pi * ps * b_theta;
        jac[6][4] = pi * b;
        jac[6][5] = r * pv;
        jac[6][6] = r * p_i;

        f1[4] = -ps * b;
        f1[6] = ps * b;
    }
    (jac, f1)
}

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-6,
            max_iter: 500,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub t: Vec<f64>,
    /// Control value on each step `[t_n, t_{n+1})`.
    pub pi: Vec<f64>,
    /// Switching function `c_V g + lambda . df/dpi` at the grid points.
    pub rho: Vec<f64>,
    pub adjoint: Vec<[f64; 7]>,
    pub trajectory: Trajectory,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl SweepResult {
    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::from_steps(&self.pi, self.trajectory.horizon())
    }

    /// Largest distance of the control from `{0, nu}`.
    pub fn bang_bang_gap(&self, nu: f64) -> f64 {
        self.pi.iter().map(|&p| p.min(nu - p).abs()).fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,pi_star,rho_star")?;
        for (n, t) in self.t.iter().enumerate() {
            let p = self.pi[n.min(self.pi.len() - 1)];
            writeln!(w, "{t},{p},{}", self.rho[n])?;
        }
        Ok(())
    }
}

fn dot(a: &[f64; 7], b: &[f64; 7]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `grad L1 + (df/dx)^T lambda`, i.e. `-dlambda/dt`.
fn adjoint_rhs(sys: &ClosedSystem, x: &FluidState, pi: f64, costs: &CostParams, lam: &[f64; 7]) -> [f64; 7] {
    let (jac, _) = closed_jacobian(sys, x, pi);
    let mut out = [0.0; 7];
    for (c, o) in out.iter_mut().enumerate() {
        *o = (0..7).map(|r| jac[r][c] * lam[r]).sum();
    }
    out[0] += costs.c_v * pi * sys.g().partial(x.alpha, x.theta, 1, 0);
    out[1] += costs.c_v * pi * sys.g().partial(x.alpha, x.theta, 0, 1);
    out[2] += costs.c_i;
    out
}

fn hermite_mid(x0: &[f64; 7], x1: &[f64; 7], f0: &[f64; 7], f1: &[f64; 7], h: f64) -> FluidState {
    let mut m = [0.0; 7];
    for j in 0..7 {
        m[j] = 0.5 * (x0[j] + x1[j]) + h / 8.0 * (f0[j] - f1[j]);
    }
    FluidState::from_slice(&m)
}

/// Forward-backward sweep on the closed system. Returns the last iterate
/// with a convergence flag even when `max_iter` is exhausted.
pub fn forward_backward_sweep(
    dist: &DegreeDistribution,
    xi: &Xi,
    params: &EpidemicParams,
    costs: &CostParams,
    opts: &SweepOptions,
) -> Result<SweepResult> {
    costs.validate()?;
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::param("damping", "must lie in (0, 1]"));
    }
    let sys = ClosedSystem::new(dist, xi, params)?;
    let x0 = initial_state(params)?;
    let steps = params.steps();
    let h = params.step();
    let nu = params.nu;
    let mut pi = vec![0.0; steps];
    let mut iterations = 0;
    loop {
        iterations += 1;
        let sched = Schedule::from_steps(&pi, params.horizon)?;
        let traj = sys.solve(&x0, &sched, steps, h)?;
        let xs: Vec<[f64; 7]> = traj.states.iter().map(FluidState::to_array).collect();

        let mut lam = vec![[0.0; 7]; steps + 1];
        for n in (0..steps).rev() {
            let p = pi[n];
            let f0 = sys.derivative(&traj.states[n], p).to_array();
            let f1 = sys.derivative(&traj.states[n + 1], p).to_array();
            let mid = hermite_mid(&xs[n], &xs[n + 1], &f0, &f1, h);
            let y = lam[n + 1];
            let shift = |a: &[f64; 7], k: &[f64; 7], s: f64| {
                let mut o = *a;
                for j in 0..7 {
                    o[j] += s * k[j];
                }
                o
            };
            let k1 = adjoint_rhs(&sys, &traj.states[n + 1], p, costs, &y);
            let k2 = adjoint_rhs(&sys, &mid, p, costs, &shift(&y, &k1, 0.5 * h));
            let k3 = adjoint_rhs(&sys, &mid, p, costs, &shift(&y, &k2, 0.5 * h));
            let k4 = adjoint_rhs(&sys, &traj.states[n], p, costs, &shift(&y, &k3, h));
            let mut next = y;
            for j in 0..7 {
                next[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
            lam[n] = next;
        }

        let rho: Vec<f64> = (0..=steps)
            .map(|n| {
                let (_, f1) = closed_jacobian(&sys, &traj.states[n], 0.0);
                costs.c_v * traj.s[n] + dot(&lam[n], &f1)
            })
            .collect();
        let mut change: f64 = 0.0;
        for n in 0..steps {
            let target = if 0.5 * (rho[n] + rho[n + 1]) < 0.0 { nu } else { 0.0 };
            let updated = (1.0 - opts.damping) * pi[n] + opts.damping * target;
            change = change.max((updated - pi[n]).abs());
            pi[n] = updated;
        }
        let done = change < opts.tol;
        if done || iterations >= opts.max_iter {
            let sched = Schedule::from_steps(&pi, params.horizon)?;
            let traj = sys.solve(&x0, &sched, steps, h)?;
            let cost = social_cost(&traj, &sched, costs)?;
            return Ok(SweepResult {
                t: traj.t.clone(),
                pi,
                rho,
                adjoint: lam,
                trajectory: traj,
                cost,
                iterations,
                converged: done,
            });
        }
    }
}
