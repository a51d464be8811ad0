//! Fluid-limit ODE systems and the fixed-step RK4 integrator.
//!
//! Four right-hand sides live here:
//!
//! * [`ClosedSystem`]: the seven-variable system in
//!   `(alpha, theta, I, V, pS, pI, pV)` driven by `g(alpha, theta)`;
//! * [`LinearSystem`]: the same dynamics for `xi(k) = a k + b`, written in
//!   `(beta, phi)` with `S = phi * psi(beta)`;
//! * [`MeanFieldSystem`]: homogeneous-mixing SIR-V;
//! * [`MeasureSystem`]: the degree-resolved edge-measure system, truncated at
//!   the support maximum. The closed system is an exact projection of it.
//!
//! All systems are integrated by [`integrate`]. The control `pi` is held
//! constant over each step at its value at the step midpoint, so a threshold
//! placed on the grid is reproduced exactly.

use std::io::Write;

use crate::degree::{DegreeDistribution, GFunction, Xi};
use crate::error::{Error, Result};
use crate::policy::Schedule;

pub const DEFAULT_DT: f64 = 1e-3;

/// Infection terms of the measure system switch off below this edge mass.
pub const EXTINCTION_FLOOR: f64 = 1e-10;

/// Largest bound violation the integrator silently clamps.
pub const CLAMP_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpidemicParams {
    pub r: f64,
    pub gamma: f64,
    pub nu: f64,
    pub epsilon: f64,
    pub horizon: f64,
    pub dt: f64,
}

impl Default for EpidemicParams {
    fn default() -> Self {
        Self {
            r: 3.0,
            gamma: 1.0,
            nu: 0.0,
            epsilon: 0.01,
            horizon: 20.0,
            dt: DEFAULT_DT,
        }
    }
}

impl EpidemicParams {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |name: &'static str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::param(name, format!("must be finite and >= 0, got {v}")))
            }
        };
        finite_nonneg("r", self.r)?;
        finite_nonneg("gamma", self.gamma)?;
        finite_nonneg("nu", self.nu)?;
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::param(
                "epsilon",
                format!("must satisfy 0 < ε < 1/2, got {}", self.epsilon),
            ));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::param("dt", format!("must be > 0, got {}", self.dt)));
        }
        if !(self.horizon.is_finite() && self.horizon >= self.dt) {
            return Err(Error::param(
                "T",
                format!("horizon {} must be >= dt = {}", self.horizon, self.dt),
            ));
        }
        Ok(())
    }

    /// Number of RK4 steps; `dt` is adjusted so that it divides the horizon.
    pub fn steps(&self) -> usize {
        ((self.horizon / self.dt).round() as usize).max(1)
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.steps() as f64
    }

    pub fn s0(&self) -> f64 {
        1.0 - self.epsilon
    }
}

/// A point of the closed system.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FluidState {
    pub alpha: f64,
    pub theta: f64,
    pub i: f64,
    pub v: f64,
    pub ps: f64,
    pub pi: f64,
    pub pv: f64,
}

impl FluidState {
    pub fn to_array(&self) -> [f64; 7] {
        [
            self.alpha, self.theta, self.i, self.v, self.ps, self.pi, self.pv,
        ]
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            alpha: x[0],
            theta: x[1],
            i: x[2],
            v: x[3],
            ps: x[4],
            pi: x[5],
            pv: x[6],
        }
    }

    pub fn pr(&self) -> f64 {
        1.0 - self.ps - self.pi - self.pv
    }
}

/// `alpha = theta = 1`, `I = eps`, `pI = eps / (1 - eps)`, `pS = (1 - 2 eps) / (1 - eps)`.
pub fn initial_state(params: &EpidemicParams) -> Result<FluidState> {
    let e = params.epsilon;
    if !(e > 0.0 && e < 0.5) {
        return Err(Error::param(
            "epsilon",
            format!("must satisfy 0 < ε < 1/2, got {e}"),
        ));
    }
    Ok(FluidState {
        alpha: 1.0,
        theta: 1.0,
        i: e,
        v: 0.0,
        ps: (1.0 - 2.0 * e) / (1.0 - e),
        pi: e / (1.0 - e),
        pv: 0.0,
    })
}

/// A vector field `dx/dt = f(x, pi)` with box constraints on each coordinate.
pub trait OdeSystem {
    fn dim(&self) -> usize;

    fn rhs(&self, x: &[f64], pi: f64, dx: &mut [f64]);

    fn bounds(&self, _index: usize) -> (f64, f64) {
        (0.0, 1.0)
    }
}

/// Row-major solution on a uniform grid of `steps + 1` points.
#[derive(Clone, Debug)]
pub struct Solution {
    pub t: Vec<f64>,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Solution {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn last(&self) -> &[f64] {
        self.row(self.len() - 1)
    }
}

/// Reusable RK4 stage buffers.
struct Rk4Work {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Work {
    fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }

    fn step<S: OdeSystem + ?Sized>(&mut self, sys: &S, x: &mut [f64], pi: f64, h: f64) {
        let n = x.len();
        sys.rhs(x, pi, &mut self.k1);
        for j in 0..n {
            self.tmp[j] = x[j] + 0.5 * h * self.k1[j];
        }
        sys.rhs(&self.tmp, pi, &mut self.k2);
        for j in 0..n {
            self.tmp[j] = x[j] + 0.5 * h * self.k2[j];
        }
        sys.rhs(&self.tmp, pi, &mut self.k3);
        for j in 0..n {
            self.tmp[j] = x[j] + h * self.k3[j];
        }
        sys.rhs(&self.tmp, pi, &mut self.k4);
        for j in 0..n {
            x[j] += h / 6.0 * (self.k1[j] + 2.0 * self.k2[j] + 2.0 * self.k3[j] + self.k4[j]);
        }
    }
}

fn enforce_bounds<S: OdeSystem + ?Sized>(sys: &S, x: &mut [f64], t: f64) -> Result<()> {
    for (j, v) in x.iter_mut().enumerate() {
        let (lo, hi) = sys.bounds(j);
        if !v.is_finite() {
            return Err(Error::Numerical(format!(
                "coordinate {j} became non-finite at t = {t}"
            )));
        }
        if *v < lo {
            if *v < lo - CLAMP_TOL {
                return Err(Error::Numerical(format!(
                    "coordinate {j} = {v:e} below {lo} at t = {t}"
                )));
            }
            *v = lo;
        } else if *v > hi {
            if *v > hi + CLAMP_TOL {
                return Err(Error::Numerical(format!(
                    "coordinate {j} = {v:e} above {hi} at t = {t}"
                )));
            }
            *v = hi;
        }
    }
    Ok(())
}

/// Fixed-step classical RK4 over `[0, steps * h]`.
pub fn integrate<S: OdeSystem + ?Sized>(
    sys: &S,
    x0: &[f64],
    schedule: &Schedule,
    steps: usize,
    h: f64,
) -> Result<Solution> {
    let dim = sys.dim();
    if x0.len() != dim {
        return Err(Error::param("x0", format!("expected {dim} coordinates")));
    }
    let mut x = x0.to_vec();
    enforce_bounds(sys, &mut x, 0.0)?;
    let mut data = Vec::with_capacity((steps + 1) * dim);
    let mut t = Vec::with_capacity(steps + 1);
    data.extend_from_slice(&x);
    t.push(0.0);
    let mut work = Rk4Work::new(dim);
    for n in 0..steps {
        let t0 = n as f64 * h;
        let pi = schedule.value(t0 + 0.5 * h);
        work.step(sys, &mut x, pi, h);
        let t1 = (n + 1) as f64 * h;
        enforce_bounds(sys, &mut x, t1)?;
        data.extend_from_slice(&x);
        t.push(t1);
    }
    Ok(Solution { t, dim, data })
}

/// Which two variables occupy the first two columns of a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coordinates {
    AlphaTheta,
    BetaPhi,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub states: Vec<FluidState>,
    /// Susceptible fraction at each grid point.
    pub s: Vec<f64>,
    pub coords: Coordinates,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        *self.t.last().unwrap()
    }

    pub fn dt(&self) -> f64 {
        self.t[1] - self.t[0]
    }

    pub fn r(&self, idx: usize) -> f64 {
        let x = &self.states[idx];
        1.0 - self.s[idx] - x.i - x.v
    }

    pub fn pr(&self, idx: usize) -> f64 {
        self.states[idx].pr()
    }

    pub fn last(&self) -> &FluidState {
        self.states.last().unwrap()
    }

    /// `(t, I)` at the grid maximum of `I`.
    pub fn i_peak(&self) -> (f64, f64) {
        self.states
            .iter()
            .enumerate()
            .fold((0.0, f64::NEG_INFINITY), |best, (n, x)| {
                if x.i > best.1 {
                    (self.t[n], x.i)
                } else {
                    best
                }
            })
    }

    /// Grid index of the largest grid time `<= t`.
    pub fn index_at(&self, t: f64) -> usize {
        let h = self.dt();
        ((t / h + 1e-9).floor() as usize).min(self.len() - 1)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let (a, b) = match self.coords {
            Coordinates::AlphaTheta => ("alpha", "theta"),
            Coordinates::BetaPhi => ("beta", "phi"),
        };
        writeln!(w, "t,S,I,R,V,pS,pI,pR,pV,{a},{b}")?;
        for n in 0..self.len() {
            let x = &self.states[n];
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                self.t[n],
                self.s[n],
                x.i,
                self.r(n),
                x.v,
                x.ps,
                x.pi,
                x.pr(),
                x.pv,
                x.alpha,
                x.theta
            )?;
        }
        Ok(())
    }
}

/// The closed seven-variable system.
#[derive(Clone, Debug)]
pub struct ClosedSystem {
    g: GFunction,
    r: f64,
    gamma: f64,
}

impl ClosedSystem {
    pub fn new(dist: &DegreeDistribution, xi: &Xi, params: &EpidemicParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            g: GFunction::new(dist, xi, params.s0())?,
            r: params.r,
            gamma: params.gamma,
        })
    }

    pub fn g(&self) -> &GFunction {
        &self.g
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Time derivative of the closed system at `x` under control value `pi`.
    ///
    /// When `dg/dalpha` vanishes no susceptible half-edges remain; the edge
    /// probabilities are then frozen.
    pub fn derivative(&self, x: &FluidState, pi: f64) -> FluidState {
        let FluidState {
            alpha,
            theta,
            i,
            ps,
            pi: pin,
            pv,
            ..
        } = *x;
        let j = self.g.jet(alpha, theta);
        let r = self.r;
        let live = j.ga > f64::MIN_POSITIVE;
        let (a_ratio, b_ratio) = if live {
            (alpha * j.gaa / j.ga, theta * j.gat / j.ga)
        } else {
            (0.0, 0.0)
        };
        let mut d = FluidState {
            alpha: -r * pin * alpha,
            theta: -pi * theta,
            i: -self.gamma * i + r * pin * alpha * j.ga,
            v: pi * theta * j.gt,
            ..Default::default()
        };
        if live {
            d.ps = r * pin * ps * (1.0 - a_ratio) - pi * ps * b_ratio;
            d.pi = -self.gamma * pin + r * pin * ps * a_ratio - r * pin * (1.0 - pin);
            d.pv = r * pin * pv + pi * ps * b_ratio;
        }
        d
    }

    pub fn susceptible(&self, x: &FluidState) -> f64 {
        self.g.partial(x.alpha, x.theta, 0, 0)
    }

    pub fn solve(&self, x0: &FluidState, schedule: &Schedule, steps: usize, h: f64) -> Result<Trajectory> {
        let sol = integrate(self, &x0.to_array(), schedule, steps, h)?;
        Ok(self.to_trajectory(sol))
    }

    pub(crate) fn to_trajectory(&self, sol: Solution) -> Trajectory {
        let states: Vec<FluidState> = (0..sol.len()).map(|n| FluidState::from_slice(sol.row(n))).collect();
        let s = states.iter().map(|x| self.susceptible(x)).collect();
        Trajectory {
            t: sol.t,
            states,
            s,
            coords: Coordinates::AlphaTheta,
        }
    }

    /// `|S_h(T) - S_{h/2}(T)|`, the step-doubling diagnostic.
    pub fn step_doubling(&self, x0: &FluidState, schedule: &Schedule, steps: usize, h: f64) -> Result<f64> {
        let coarse = self.solve(x0, schedule, steps, h)?;
        let fine = self.solve(x0, schedule, 2 * steps, 0.5 * h)?;
        Ok((coarse.s.last().unwrap() - fine.s.last().unwrap()).abs())
    }
}

impl OdeSystem for ClosedSystem {
    fn dim(&self) -> usize {
        7
    }

    fn rhs(&self, x: &[f64], pi: f64, dx: &mut [f64]) {
        let d = self.derivative(&FluidState::from_slice(x), pi);
        dx.copy_from_slice(&d.to_array());
    }
}

/// Integrates the closed system from the standard initial condition.
pub fn solve_fluid(
    dist: &DegreeDistribution,
    xi: &Xi,
    schedule: &Schedule,
    params: &EpidemicParams,
) -> Result<Trajectory> {
    let sys = ClosedSystem::new(dist, xi, params)?;
    check_schedule(schedule, params)?;
    sys.solve(&initial_state(params)?, schedule, params.steps(), params.step())
}

fn check_schedule(schedule: &Schedule, params: &EpidemicParams) -> Result<()> {
    schedule.check_bound(params.nu)?;
    if (schedule.horizon() - params.horizon).abs() > 1e-9 * params.horizon.max(1.0) {
        return Err(Error::param(
            "schedule",
            format!(
                "horizon {} differs from T = {}",
                schedule.horizon(),
                params.horizon
            ),
        ));
    }
    Ok(())
}

/// Closed dynamics for `xi(k) = a k + b` in `(beta, phi)`:
/// `beta = alpha theta^a`, `phi = theta^b`, `S = S0 phi psi(beta)`.
#[derive(Clone, Debug)]
pub struct LinearSystem {
    dist: DegreeDistribution,
    s0: f64,
    a: f64,
    b: f64,
    r: f64,
    gamma: f64,
}

impl LinearSystem {
    pub fn new(dist: &DegreeDistribution, a: f64, b: f64, params: &EpidemicParams) -> Result<Self> {
        params.validate()?;
        Xi::Affine { a, b }.validate(dist.k_max())?;
        Ok(Self {
            dist: dist.clone(),
            s0: params.s0(),
            a,
            b,
            r: params.r,
            gamma: params.gamma,
        })
    }

    pub fn derivative(&self, x: &FluidState, pi: f64) -> FluidState {
        let FluidState {
            alpha: beta,
            theta: phi,
            i,
            ps,
            pi: pin,
            pv,
            ..
        } = *x;
        let [psi0, psi1, psi2] = self.dist.psi_jet(beta);
        let (r, a, b) = (self.r, self.a, self.b);
        let mut d = FluidState {
            alpha: (-r * pin - a * pi) * beta,
            theta: -b * pi * phi,
            i: -self.gamma * i + r * pin * self.s0 * phi * beta * psi1,
            v: pi * self.s0 * phi * (a * beta * psi1 + b * psi0),
            ..Default::default()
        };
        if psi1 > f64::MIN_POSITIVE {
            let ratio = beta * psi2 / psi1;
            let vacc = a + b + a * ratio;
            d.ps = r * pin * ps * (1.0 - ratio) - pi * ps * vacc;
            d.pi = -self.gamma * pin + r * pin * ps * ratio - r * pin * (1.0 - pin);
            d.pv = r * pin * pv + pi * ps * vacc;
        }
        d
    }

    pub fn susceptible(&self, x: &FluidState) -> f64 {
        self.s0 * x.theta * self.dist.psi_unchecked(x.alpha, 0)
    }

    pub fn solve(&self, x0: &FluidState, schedule: &Schedule, steps: usize, h: f64) -> Result<Trajectory> {
        let sol = integrate(self, &x0.to_array(), schedule, steps, h)?;
        let states: Vec<FluidState> = (0..sol.len()).map(|n| FluidState::from_slice(sol.row(n))).collect();
        let s = states.iter().map(|x| self.susceptible(x)).collect();
        Ok(Trajectory {
            t: sol.t,
            states,
            s,
            coords: Coordinates::BetaPhi,
        })
    }
}

impl OdeSystem for LinearSystem {
    fn dim(&self) -> usize {
        7
    }

    fn rhs(&self, x: &[f64], pi: f64, dx: &mut [f64]) {
        let d = self.derivative(&FluidState::from_slice(x), pi);
        dx.copy_from_slice(&d.to_array());
    }
}

/// Homogeneous-mixing SIR-V on `(S, I, R)`.
#[derive(Clone, Copy, Debug)]
pub struct MeanFieldSystem {
    pub r: f64,
    pub gamma: f64,
}

/// `S' = -r I S - pi S`, `I' = r I S - gamma I`, `R' = gamma I + pi S`.
pub fn rhs_meanfield(x: [f64; 3], r: f64, gamma: f64, pi: f64) -> [f64; 3] {
    let [s, i, _] = x;
    let inf = r * i * s;
    [-inf - pi * s, inf - gamma * i, gamma * i + pi * s]
}

impl OdeSystem for MeanFieldSystem {
    fn dim(&self) -> usize {
        3
    }

    fn rhs(&self, x: &[f64], pi: f64, dx: &mut [f64]) {
        dx.copy_from_slice(&rhs_meanfield([x[0], x[1], x[2]], self.r, self.gamma, pi));
    }
}

/// Degree-resolved edge-measure system.
///
/// State layout: `[alpha, theta, I, R, V, mu_IS[0..=K], mu_RS[0..=K], mu_VS[0..=K]]`,
/// where `mu_XS(i)` is the mass of `X` nodes with `i` susceptible neighbours.
/// `mu_S(k) = S0 p_k alpha^k theta^xi(k)` is carried in closed form.
#[derive(Clone, Debug)]
pub struct MeasureSystem {
    weights: Vec<f64>,
    xi: Vec<f64>,
    r: f64,
    gamma: f64,
}

/// Aggregates of a measure-system run on the integration grid.
#[derive(Clone, Debug, Default)]
pub struct MeasureTrajectory {
    pub t: Vec<f64>,
    pub s: Vec<f64>,
    pub i: Vec<f64>,
    pub r: Vec<f64>,
    pub v: Vec<f64>,
    pub n_s: Vec<f64>,
    pub n_is: Vec<f64>,
    pub n_rs: Vec<f64>,
    pub n_vs: Vec<f64>,
    /// `alpha_t`, `theta_t`, for checking `S = g(alpha, theta)`.
    pub alpha: Vec<f64>,
    pub theta: Vec<f64>,
    /// Terminal `(mu_S, mu_IS, mu_RS, mu_VS)`.
    pub final_measures: [Vec<f64>; 4],
}

const HEAD: usize = 5;

struct Aggregates {
    mu_s: Vec<f64>,
    n_s: f64,
    n_is: f64,
    n_rs: f64,
    n_vs: f64,
}

impl MeasureSystem {
    /// `k_max` may exceed the support maximum; extra classes stay empty.
    pub fn new(dist: &DegreeDistribution, xi: &Xi, params: &EpidemicParams, k_max: usize) -> Result<Self> {
        params.validate()?;
        if k_max < dist.k_max() {
            return Err(Error::param(
                "k_max",
                format!("{k_max} below support maximum {}", dist.k_max()),
            ));
        }
        let g = GFunction::new(dist, xi, params.s0())?;
        let mut weights = g.weights().to_vec();
        weights.resize(k_max + 1, 0.0);
        let xi: Vec<f64> = (0..=k_max).map(|k| xi.value(k)).collect();
        Ok(Self {
            weights,
            xi,
            r: params.r,
            gamma: params.gamma,
        })
    }

    pub fn k_max(&self) -> usize {
        self.weights.len() - 1
    }

    /// `mu_IS(k) = eps p_k`: infected nodes are uniform, all their edges lead to susceptibles.
    pub fn initial_state(&self, params: &EpidemicParams) -> Vec<f64> {
        let k = self.k_max() + 1;
        let mut x = vec![0.0; HEAD + 3 * k];
        x[0] = 1.0;
        x[1] = 1.0;
        x[2] = params.epsilon;
        let s0 = params.s0();
        for (j, w) in self.weights.iter().enumerate() {
            x[HEAD + j] = params.epsilon * w / s0;
        }
        x
    }

    fn aggregates(&self, x: &[f64]) -> Aggregates {
        let k = self.k_max() + 1;
        let (alpha, theta) = (x[0], x[1]);
        let ln_t = theta.ln();
        let mut a_pow = 1.0;
        let mut mu_s = vec![0.0; k];
        for j in 0..k {
            if j > 0 {
                a_pow *= alpha;
            }
            if self.weights[j] > 0.0 {
                mu_s[j] = self.weights[j] * a_pow * (self.xi[j] * ln_t).exp();
            }
        }
        let first = |m: &[f64]| m.iter().enumerate().map(|(i, v)| i as f64 * v).sum::<f64>();
        Aggregates {
            n_s: first(&mu_s),
            n_is: first(&x[HEAD..HEAD + k]),
            n_rs: first(&x[HEAD + k..HEAD + 2 * k]),
            n_vs: first(&x[HEAD + 2 * k..HEAD + 3 * k]),
            mu_s,
        }
    }

    pub fn solve(&self, params: &EpidemicParams, schedule: &Schedule) -> Result<MeasureTrajectory> {
        check_schedule(schedule, params)?;
        let x0 = self.initial_state(params);
        let sol = integrate(self, &x0, schedule, params.steps(), params.step())?;
        let k = self.k_max() + 1;
        let mut out = MeasureTrajectory {
            t: sol.t.clone(),
            ..Default::default()
        };
        for n in 0..sol.len() {
            let x = sol.row(n);
            let agg = self.aggregates(x);
            out.s.push(agg.mu_s.iter().sum());
            out.i.push(x[2]);
            out.r.push(x[3]);
            out.v.push(x[4]);
            out.n_s.push(agg.n_s);
            out.n_is.push(agg.n_is);
            out.n_rs.push(agg.n_rs);
            out.n_vs.push(agg.n_vs);
            out.alpha.push(x[0]);
            out.theta.push(x[1]);
            if n + 1 == sol.len() {
                out.final_measures = [
                    agg.mu_s,
                    x[HEAD..HEAD + k].to_vec(),
                    x[HEAD + k..HEAD + 2 * k].to_vec(),
                    x[HEAD + 2 * k..HEAD + 3 * k].to_vec(),
                ];
            }
        }
        Ok(out)
    }
}

/// Coefficients of `sum_{k >= shift} u_k (q + p z)^(k - shift)`.
fn binomial_mixture(u: &[f64], shift: usize, p: f64, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let q = 1.0 - p;
    let top = match u.iter().rposition(|&w| w != 0.0) {
        Some(t) if t >= shift => t,
        _ => return,
    };
    // Horner in x = q + p z
    let mut len = 1;
    out[0] = u[top];
    for k in (shift..top).rev() {
        out[len] = 0.0;
        for i in (1..=len).rev() {
            out[i] = out[i] * q + out[i - 1] * p;
        }
        out[0] *= q;
        out[0] += u[k];
        len += 1;
    }
}

impl OdeSystem for MeasureSystem {
    fn dim(&self) -> usize {
        HEAD + 3 * (self.k_max() + 1)
    }

    fn rhs(&self, x: &[f64], pi: f64, dx: &mut [f64]) {
        let k = self.k_max() + 1;
        let agg = self.aggregates(x);
        let (alpha, theta, i_mass) = (x[0], x[1], x[2]);
        let live = agg.n_s > f64::MIN_POSITIVE;
        let infecting = live && agg.n_is >= EXTINCTION_FLOOR;
        let (p_i, p_s) = if live {
            let p_i = agg.n_is / agg.n_s;
            let p_s = (1.0 - (agg.n_is + agg.n_rs + agg.n_vs) / agg.n_s).clamp(0.0, 1.0);
            (p_i, p_s)
        } else {
            (0.0, 0.0)
        };
        let force = if infecting { self.r * p_i } else { 0.0 };

        let mut m2 = 0.0;
        let mut mxi = 0.0;
        let mut u_inf = vec![0.0; k];
        let mut u_vac = vec![0.0; k];
        let mut vacc_rate = 0.0;
        for j in 0..k {
            let mu = agg.mu_s[j];
            let kf = j as f64;
            m2 += kf * (kf - 1.0) * mu;
            mxi += self.xi[j] * kf * mu;
            u_inf[j] = force * kf * mu;
            u_vac[j] = pi * self.xi[j] * mu;
            vacc_rate += u_vac[j];
        }
        let c_r = if live { (force * m2 + pi * mxi) / agg.n_s } else { 0.0 };
        let c_i = c_r + if infecting { self.r } else { 0.0 };

        dx[0] = -force * alpha;
        dx[1] = -pi * theta;
        dx[2] = if infecting { self.r * agg.n_is } else { 0.0 } - self.gamma * i_mass;
        dx[3] = self.gamma * i_mass;
        dx[4] = vacc_rate;

        let mut mix_i = vec![0.0; k];
        let mut mix_v = vec![0.0; k];
        binomial_mixture(&u_inf, 1, p_s, &mut mix_i);
        binomial_mixture(&u_vac, 0, p_s, &mut mix_v);

        let shift = |mu: &[f64], i: usize| {
            let next = if i + 1 < k { (i + 1) as f64 * mu[i + 1] } else { 0.0 };
            next - i as f64 * mu[i]
        };
        let (is, rest) = x[HEAD..].split_at(k);
        let (rs, vs) = rest.split_at(k);
        let (dis, drest) = dx[HEAD..].split_at_mut(k);
        let (drs, dvs) = drest.split_at_mut(k);
        for i in 0..k {
            dis[i] = -self.gamma * is[i] + mix_i[i] + c_i * shift(is, i);
            drs[i] = self.gamma * is[i] + c_r * shift(rs, i);
            dvs[i] = mix_v[i] + c_r * shift(vs, i);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degree::Family;

    fn params(eps: f64) -> EpidemicParams {
        EpidemicParams {
            r: 3.0,
            gamma: 1.0,
            nu: 0.3,
            epsilon: eps,
            horizon: 10.0,
            dt: 1e-2,
        }
    }

    #[test]
    fn initial_state_examples() {
        let x = initial_state(&params(0.01)).unwrap();
        assert!((x.pi - 0.01 / 0.99).abs() < 1e-15);
        assert!((x.ps - 0.98 / 0.99).abs() < 1e-15);
        let x = initial_state(&params(1.0 / 3.0)).unwrap();
        assert!((x.pi - 0.5).abs() < 1e-15);
        assert!((x.ps - 0.5).abs() < 1e-15);
        let x = initial_state(&params(1e-12)).unwrap();
        assert!(x.pi < 1e-11 && (x.ps - 1.0).abs() < 1e-11);
        assert!(initial_state(&params(0.6)).is_err());
        assert!(initial_state(&params(0.0)).is_err());
    }

    #[test]
    fn epsilon_message_cites_bounds() {
        let err = params(0.6).validate().unwrap_err().to_string();
        assert!(err.contains("0 < ε < 1/2"), "{err}");
    }

    #[test]
    fn rhs_examples() {
        let d = DegreeDistribution::build(&Family::poisson(5.0)).unwrap();
        let sys = ClosedSystem::new(&d, &Xi::proportional(), &params(0.01)).unwrap();
        let x = FluidState {
            alpha: 0.9,
            theta: 0.8,
            i: 0.2,
            v: 0.1,
            ps: 0.5,
            pi: 0.0,
            pv: 0.2,
        };
        let dx = sys.derivative(&x, 0.0);
        assert_eq!(
            dx.to_array(),
            [0.0, 0.0, -0.2, 0.0, 0.0, 0.0, 0.0]
        );

        let mut p = params(0.01);
        p.r = 0.0;
        let sys = ClosedSystem::new(&d, &Xi::proportional(), &p).unwrap();
        let x = FluidState { pi: 0.1, ..x };
        let dx = sys.derivative(&x, 0.3);
        assert_eq!(dx.alpha, 0.0);
        assert!((dx.theta + 0.3 * 0.8).abs() < 1e-15);
        let gt = sys.g().partial(0.9, 0.8, 0, 1);
        assert!((dx.v - 0.3 * 0.8 * gt).abs() < 1e-15);
    }

    #[test]
    fn regular_initial_pi_derivative() {
        let d = DegreeDistribution::build(&Family::regular(5)).unwrap();
        let p = params(0.01);
        let sys = ClosedSystem::new(&d, &Xi::proportional(), &p).unwrap();
        let x = initial_state(&p).unwrap();
        let dx = sys.derivative(&x, 0.0);
        // independent arithmetic: A = 4 on a 5-regular graph at alpha = theta = 1
        let (pi, ps) = (0.01 / 0.99, 0.98 / 0.99);
        let expect = pi * (-1.0 + 3.0 * ps * 4.0 - 3.0 * (1.0 - pi));
        assert!((dx.pi - expect).abs() < 1e-15);
        assert!((dx.pi - 0.0799).abs() < 5e-4);
    }

    #[test]
    fn meanfield_examples() {
        assert_eq!(rhs_meanfield([0.5, 0.3, 0.2], 0.0, 1.0, 0.0), [0.0, -0.3, 0.3]);
        assert_eq!(rhs_meanfield([0.0, 0.3, 0.7], 3.0, 1.0, 0.2)[0], 0.0);
        let d = rhs_meanfield([0.99, 0.01, 0.0], 3.0, 1.0, 0.0);
        assert!((d[1] - 0.0197).abs() < 1e-15);
    }

    struct Decay(f64);
    impl OdeSystem for Decay {
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&self, x: &[f64], _pi: f64, dx: &mut [f64]) {
            dx[0] = -self.0 * x[0];
        }
    }

    struct Still;
    impl OdeSystem for Still {
        fn dim(&self) -> usize {
            2
        }
        fn rhs(&self, _x: &[f64], _pi: f64, dx: &mut [f64]) {
            dx.fill(0.0);
        }
    }

    struct Drift;
    impl OdeSystem for Drift {
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&self, _x: &[f64], _pi: f64, dx: &mut [f64]) {
            dx[0] = -1.0;
        }
    }

    #[test]
    fn integrator_examples() {
        let zero = Schedule::constant(0.0, 1.0).unwrap();
        let sol = integrate(&Still, &[0.3, 0.7], &zero, 10, 0.1).unwrap();
        assert!(sol.data.chunks(2).all(|r| r == [0.3, 0.7]));

        let sol = integrate(&Decay(1.0), &[0.01], &zero, 100, 0.01).unwrap();
        assert!((sol.last()[0] - 0.01 * (-1.0f64).exp()).abs() < 1e-8);

        let err = integrate(&Drift, &[0.5], &zero, 100, 0.01).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }

    #[test]
    fn integrator_clamps_tiny_violations() {
        struct Nudge;
        impl OdeSystem for Nudge {
            fn dim(&self) -> usize {
                1
            }
            fn rhs(&self, _x: &[f64], _pi: f64, dx: &mut [f64]) {
                dx[0] = -1e-8;
            }
        }
        let zero = Schedule::constant(0.0, 1.0).unwrap();
        let sol = integrate(&Nudge, &[1e-12], &zero, 1, 0.01).unwrap();
        assert_eq!(sol.last()[0], 0.0);
    }

    #[test]
    fn binomial_mixture_matches_direct() {
        let u = [0.0, 0.3, 0.0, 0.5, 0.2];
        let p = 0.35;
        let mut out = vec![0.0; 5];
        binomial_mixture(&u, 1, p, &mut out);
        let mut direct = [0.0; 5];
        for (k, w) in u.iter().enumerate().skip(1) {
            let n = k - 1;
            for i in 0..=n {
                let c = (0..i).fold(1.0, |c, j| c * (n - j) as f64 / (j + 1) as f64);
                direct[i] += w * c * p.powi(i as i32) * (1.0 - p).powi((n - i) as i32);
            }
        }
        for i in 0..5 {
            assert!((out[i] - direct[i]).abs() < 1e-15);
        }
        binomial_mixture(&u, 0, p, &mut out);
        let total: f64 = out.iter().sum();
        assert!((total - 1.0).abs() < 1e-15);
    }
}
