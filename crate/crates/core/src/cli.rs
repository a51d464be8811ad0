//! Scenario files and the subcommands of the `epinet` binary.
//!
//! A scenario is a TOML document. Every table is optional except
//! `distribution`; unknown keys are rejected.
//!
//! ```toml
//! name = "bimodal_fig4a"
//! distribution = { family = "bimodal", params = { lambda = 3.0, high = 13, p = 0.8 } }
//!
//! [epidemic]        # defaults: r = 3, gamma = 1, nu = 0, epsilon = 0.01, horizon = 20, dt = 1e-3
//! nu = 0.2
//!
//! [xi]              # proportional | constant { value } | affine { a, b } | table { values }
//! kind = "proportional"
//!
//! [policy]          # none | threshold { tau } | schedule { starts, values }
//! kind = "threshold"
//! tau = 2.0
//!
//! [costs]
//! c_i = 50.0
//! c_v = 10.0
//! ```
//!
//! Further tables: `optimize` (`tau_points`), `sweep` (`damping`, `tol`,
//! `max_iter`), `best_response` (`theta_factor`, `degrees`), `simulation`
//! (`n`, `replicas`, `seed`, `sample_dt`, `record_events`) and `metrics`
//! (`n`, `replicas`, `seed`).

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::{
    br_thresholds, forward_backward_sweep, optimize_threshold, tau_grid, write_thresholds,
    BestResponseOptions, CostParams, SweepOptions,
};
use crate::degree::{DegreeDistribution, Family, Xi};
use crate::error::{Error, Result};
use crate::finalsize::{final_sizes, r0, write_final_sizes, EpidemicIndicators};
use crate::fluid::{initial_state, solve_fluid, ClosedSystem, EpidemicParams};
use crate::netgen::{generate, graph_metrics, GraphMetrics};
use crate::policy::{Schedule, VaccinationPolicy};
use crate::stoch::{ensemble, run_sirv, SimOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistributionSpec {
    Poisson {
        lambda: f64,
    },
    Bimodal {
        lambda: f64,
        high: usize,
        p: f64,
    },
    Regular {
        degree: usize,
    },
    PowerLaw {
        exponent: f64,
        cutoff: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_degree: Option<usize>,
    },
    /// Explicit pmf over degrees `0..values.len()`.
    Pmf {
        values: Vec<f64>,
    },
}

impl DistributionSpec {
    pub fn build(&self) -> Result<DegreeDistribution> {
        let family = match *self {
            Self::Poisson { lambda } => Family::poisson(lambda),
            Self::Bimodal { lambda, high, p } => Family::bimodal(lambda, high, p),
            Self::Regular { degree } => Family::regular(degree),
            Self::PowerLaw {
                exponent,
                cutoff,
                max_degree,
            } => Family::power_law(exponent, cutoff, max_degree),
            Self::Pmf { ref values } => return DegreeDistribution::from_pmf(values.clone(), "pmf"),
        };
        DegreeDistribution::build(&family)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpidemicSpec {
    pub r: f64,
    pub gamma: f64,
    pub nu: f64,
    pub epsilon: f64,
    pub horizon: f64,
    pub dt: f64,
}

impl Default for EpidemicSpec {
    fn default() -> Self {
        let p = EpidemicParams::default();
        Self {
            r: p.r,
            gamma: p.gamma,
            nu: p.nu,
            epsilon: p.epsilon,
            horizon: p.horizon,
            dt: p.dt,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum XiSpec {
    #[default]
    Proportional,
    Constant {
        value: f64,
    },
    Affine {
        a: f64,
        b: f64,
    },
    Table {
        values: Vec<f64>,
    },
}

impl XiSpec {
    pub fn build(&self) -> Xi {
        match *self {
            Self::Proportional => Xi::proportional(),
            Self::Constant { value } => Xi::constant(value),
            Self::Affine { a, b } => Xi::Affine { a, b },
            Self::Table { ref values } => Xi::Tabulated(values.clone()),
        }
    }
}

/// The rate bound `nu` comes from the `epidemic` table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    #[default]
    None,
    Threshold {
        tau: f64,
    },
    Schedule {
        starts: Vec<f64>,
        values: Vec<f64>,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSpec {
    pub c_i: f64,
    pub c_v: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeSpec {
    pub tau_points: usize,
}

impl Default for OptimizeSpec {
    fn default() -> Self {
        Self { tau_points: 201 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        let o = SweepOptions::default();
        Self {
            damping: o.damping,
            tol: o.tol,
            max_iter: o.max_iter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BestResponseSpec {
    pub theta_factor: bool,
    /// Defaults to every degree in the support.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degrees: Option<Vec<usize>>,
}

impl Default for BestResponseSpec {
    fn default() -> Self {
        Self {
            theta_factor: true,
            degrees: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSpec {
    pub n: usize,
    pub replicas: usize,
    pub seed: u64,
    pub sample_dt: f64,
    pub record_events: bool,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            n: 10_000,
            replicas: 50,
            seed: 1,
            sample_dt: 0.05,
            record_events: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSpec {
    pub n: usize,
    pub replicas: usize,
    pub seed: u64,
}

impl Default for MetricsSpec {
    fn default() -> Self {
        Self {
            n: 2000,
            replicas: 5,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_name")]
    pub name: String,
    pub distribution: DistributionSpec,
    #[serde(default)]
    pub epidemic: EpidemicSpec,
    #[serde(default)]
    pub xi: XiSpec,
    #[serde(default)]
    pub policy: PolicySpec,
    #[serde(default)]
    pub costs: CostSpec,
    #[serde(default)]
    pub optimize: OptimizeSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub best_response: BestResponseSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsSpec>,
}

fn default_name() -> String {
    "scenario".into()
}

impl Scenario {
    pub fn params(&self) -> EpidemicParams {
        let e = &self.epidemic;
        EpidemicParams {
            r: e.r,
            gamma: e.gamma,
            nu: e.nu,
            epsilon: e.epsilon,
            horizon: e.horizon,
            dt: e.dt,
        }
    }

    pub fn costs(&self) -> CostParams {
        CostParams {
            c_i: self.costs.c_i,
            c_v: self.costs.c_v,
        }
    }

    pub fn schedule(&self) -> Result<Schedule> {
        let e = &self.epidemic;
        match &self.policy {
            PolicySpec::None => Schedule::constant(0.0, e.horizon),
            PolicySpec::Threshold { tau } => Schedule::threshold(*tau, e.nu, e.horizon),
            PolicySpec::Schedule { starts, values } => {
                Schedule::new(starts.clone(), values.clone(), e.horizon)
            }
        }
    }

    pub fn policy(&self) -> Result<VaccinationPolicy> {
        Ok(VaccinationPolicy::new(self.xi.build(), self.schedule()?))
    }

    /// Checks every downstream precondition without running anything.
    pub fn validate(&self) -> Result<()> {
        let dist = self.distribution.build()?;
        self.params().validate()?;
        self.xi.build().validate(dist.k_max())?;
        let sched = self.schedule()?;
        sched.check_bound(self.epidemic.nu)?;
        if let PolicySpec::Threshold { tau } = self.policy {
            if !(0.0..=self.epidemic.horizon).contains(&tau) {
                return Err(Error::param("tau", format!("{tau} outside [0, horizon]")));
            }
        }
        self.costs().validate()?;
        if self.optimize.tau_points < 2 {
            return Err(Error::param("tau_points", "need at least 2"));
        }
        let s = &self.sweep;
        if !(s.damping > 0.0 && s.damping <= 1.0) {
            return Err(Error::param("damping", "must lie in (0, 1]"));
        }
        if !(s.tol > 0.0) || s.max_iter == 0 {
            return Err(Error::param("tol", "tol > 0 and max_iter >= 1 required"));
        }
        if let Some(sim) = &self.simulation {
            if sim.n < 2 || sim.replicas == 0 || !(sim.sample_dt > 0.0) {
                return Err(Error::param(
                    "simulation",
                    "need n >= 2, replicas >= 1 and sample_dt > 0",
                ));
            }
        }
        if let Some(m) = &self.metrics {
            if m.n < 3 || m.replicas == 0 {
                return Err(Error::param("metrics", "need n >= 3 and replicas >= 1"));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

/// First line whose key matches `key`, 1-based.
fn locate(source: &str, key: &str) -> Option<usize> {
    let key = match key {
        "T" => "horizon",
        "c_I" => "c_i",
        "c_V" => "c_v",
        k => k,
    };
    source.lines().position(|line| {
        let line = line.trim_start();
        line.strip_prefix(key)
            .is_some_and(|rest| rest.trim_start().starts_with('='))
            || line.contains(&format!(" {key} ="))
            || line.contains(&format!("{{{key} ="))
    })
    .map(|i| i + 1)
}

/// Parses and validates a scenario; errors carry the offending line.
pub fn parse_str(source: &str) -> Result<Scenario> {
    let scenario: Scenario = toml::from_str(source).map_err(|e| Error::Config(e.to_string()))?;
    scenario.validate().map_err(|e| match e {
        Error::InvalidParameter { name, .. } => match locate(source, name) {
            Some(line) => Error::Config(format!("line {line}: {e}")),
            None => e,
        },
        other => other,
    })?;
    Ok(scenario)
}

pub fn parse_scenario(path: &Path) -> Result<Scenario> {
    let source = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_str(&source).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Fluid,
    Simulate,
    Optimize,
    BestResponse,
    Sweep,
    FinalSize,
    Metrics,
    Reproduce,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Fluid => "fluid",
            Self::Simulate => "simulate",
            Self::Optimize => "optimize",
            Self::BestResponse => "best-response",
            Self::Sweep => "sweep",
            Self::FinalSize => "final-size",
            Self::Metrics => "metrics",
            Self::Reproduce => "reproduce",
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub dt: Option<f64>,
    pub check_steps: bool,
}

impl Overrides {
    pub fn apply(&self, scenario: &mut Scenario) -> Result<()> {
        if let Some(dt) = self.dt {
            scenario.epidemic.dt = dt;
        }
        if let Some(seed) = self.seed {
            if let Some(sim) = scenario.simulation.as_mut() {
                sim.seed = seed;
            }
            if let Some(m) = scenario.metrics.as_mut() {
                m.seed = seed;
            }
        }
        scenario.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub scenario: String,
    pub scenario_sha256: String,
    pub version: String,
    pub seeds: Vec<u64>,
    pub files: Vec<String>,
    pub timings_s: BTreeMap<String, f64>,
    pub diagnostics: BTreeMap<String, f64>,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";
}

/// `0` success, `1` bad input, `2` numerical failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        e if e.is_validation() => 1,
        Error::Io(_) => 1,
        _ => 2,
    }
}

struct Runner {
    out: PathBuf,
    manifest: RunManifest,
}

impl Runner {
    fn emit(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.out.join(name), bytes)?;
        self.manifest.files.push(name.to_string());
        Ok(())
    }

    fn write(&mut self, name: &str, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
        let mut w = BufWriter::new(File::create(self.out.join(name))?);
        f(&mut w)?;
        w.flush()?;
        self.manifest.files.push(name.to_string());
        Ok(())
    }

    fn timed<T>(&mut self, leg: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f();
        self.manifest
            .timings_s
            .insert(leg.to_string(), start.elapsed().as_secs_f64());
        out
    }

    fn finish(mut self) -> Result<RunManifest> {
        self.manifest.files.push(RunManifest::FILE.to_string());
        let json = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Config(e.to_string()))?;
        fs::write(self.out.join(RunManifest::FILE), json + "\n")?;
        Ok(self.manifest)
    }
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Runs one subcommand and writes its files plus `manifest.json` into `out`.
///
/// Files already written stay in place when a later leg fails.
pub fn run(command: Command, scenario: &Scenario, overrides: &Overrides, out: &Path) -> Result<RunManifest> {
    let mut scenario = scenario.clone();
    overrides.apply(&mut scenario)?;
    fs::create_dir_all(out)?;
    let mut runner = Runner {
        out: out.to_path_buf(),
        manifest: RunManifest {
            command: command.name().into(),
            scenario: scenario.name.clone(),
            scenario_sha256: scenario.hash()?,
            version: env!("CARGO_PKG_VERSION").into(),
            ..Default::default()
        },
    };
    let outcome = dispatch(command, &scenario, overrides, &mut runner);
    let manifest = runner.finish()?;
    outcome.map(|()| manifest)
}

fn dispatch(command: Command, sc: &Scenario, ov: &Overrides, run: &mut Runner) -> Result<()> {
    let dist = sc.distribution.build()?;
    let params = sc.params();
    let xi = sc.xi.build();
    match command {
        Command::Fluid => {
            let sched = sc.schedule()?;
            let tr = run.timed("fluid", || solve_fluid(&dist, &xi, &sched, &params))?;
            run.write("trajectory.csv", |w| tr.write_csv(w))?;
            if ov.check_steps {
                let sys = ClosedSystem::new(&dist, &xi, &params)?;
                let x0 = initial_state(&params)?;
                let diff = sys.step_doubling(&x0, &sched, params.steps(), params.step())?;
                eprintln!("step-doubling difference: {diff:e}");
                run.manifest.diagnostics.insert("step_doubling".into(), diff);
            }
        }
        Command::Simulate => {
            let sim = sc.simulation.unwrap_or_default();
            let policy = sc.policy()?;
            let opts = SimOptions {
                sample_dt: sim.sample_dt,
                record_events: sim.record_events,
                audit_every: None,
            };
            if sim.replicas == 1 {
                let seed = sim.seed;
                run.manifest.seeds.push(seed);
                let outp = run.timed("simulate", || {
                    let g = generate(&dist, sim.n, seed)?;
                    run_sirv(&g, &params, &policy, seed, &opts)
                })?;
                run.write("series.csv", |w| outp.series.write_csv(w, sim.n))?;
                if sim.record_events {
                    run.write("events.csv", |w| outp.write_events(w))?;
                }
            } else {
                let ens = run.timed("ensemble", || {
                    ensemble(&dist, sim.n, &params, &policy, sim.replicas, sim.seed, &opts)
                })?;
                run.manifest.seeds.extend(&ens.seeds);
                run.manifest.diagnostics.insert("peak_mean".into(), ens.peak_mean());
                run.manifest.diagnostics.insert("peak_stderr".into(), ens.peak_stderr());
                run.write("ensemble.csv", |w| ens.write_csv(w))?;
            }
        }
        Command::Optimize => {
            let grid = tau_grid(params.horizon, sc.optimize.tau_points);
            let rep = run.timed("optimize", || optimize_threshold(&dist, &xi, &params, &sc.costs(), &grid))?;
            run.manifest.diagnostics.insert("tau_star".into(), rep.tau_star());
            run.manifest.diagnostics.insert("cost_star".into(), rep.cost_star());
            run.write("cost_curve.csv", |w| rep.write_csv(w))?;
        }
        Command::BestResponse => {
            let sched = sc.schedule()?;
            let tr = solve_fluid(&dist, &xi, &sched, &params)?;
            let degrees = sc
                .best_response
                .degrees
                .clone()
                .unwrap_or_else(|| (0..=dist.k_max()).collect());
            let opts = BestResponseOptions {
                theta_factor: sc.best_response.theta_factor,
                ..Default::default()
            };
            let brs = run.timed("best_response", || {
                br_thresholds(&degrees, &tr, &params, &sc.costs(), &xi, &opts)
            })?;
            run.write("thresholds.csv", |w| write_thresholds(w, &brs))?;
        }
        Command::Sweep => {
            let opts = SweepOptions {
                damping: sc.sweep.damping,
                tol: sc.sweep.tol,
                max_iter: sc.sweep.max_iter,
            };
            let res = run.timed("sweep", || forward_backward_sweep(&dist, &xi, &params, &sc.costs(), &opts))?;
            run.manifest.diagnostics.insert("iterations".into(), res.iterations as f64);
            run.manifest.diagnostics.insert("cost".into(), res.cost);
            run.write("sweep.csv", |w| res.write_csv(w))?;
            if !res.converged {
                return Err(Error::NoConvergence {
                    what: "forward-backward sweep".into(),
                    iterations: res.iterations,
                });
            }
        }
        Command::FinalSize => {
            if !xi.is_proportional() {
                return Err(Error::param("xi", "final sizes require xi(k) = k"));
            }
            let tau = match sc.policy {
                PolicySpec::None => 0.0,
                PolicySpec::Threshold { tau } => tau,
                PolicySpec::Schedule { .. } => {
                    return Err(Error::param("policy", "final sizes need a threshold policy"))
                }
            };
            let ind = r0(&dist, params.r, params.gamma)?;
            run.write("indicators.csv", |w| {
                writeln!(w, "{}", EpidemicIndicators::CSV_HEADER)?;
                writeln!(w, "{}", ind.csv_row(dist.label(), params.r, params.gamma))
            })?;
            let sched = sc.schedule()?;
            let tr = solve_fluid(&dist, &xi, &sched, &params)?;
            let fs = final_sizes(&dist, &params, tau, params.nu, &tr)?;
            run.write("final_size.csv", |w| write_final_sizes(w, &[fs]))?;
        }
        Command::Metrics => {
            let m = sc.metrics.unwrap_or_default();
            let seeds: Vec<u64> = (0..m.replicas as u64).map(|j| m.seed + j).collect();
            run.manifest.seeds.extend(&seeds);
            let rows = run.timed("metrics", || metrics_rows(&dist, m.n, &seeds))?;
            run.write("metrics.csv", |w| {
                writeln!(w, "{}", GraphMetrics::CSV_HEADER)?;
                for (seed, gm) in seeds.iter().zip(&rows) {
                    writeln!(w, "{}", gm.csv_row(dist.label(), m.n, *seed))?;
                }
                Ok(())
            })?;
        }
        Command::Reproduce => reproduce(sc, run)?,
    }
    Ok(())
}

fn metrics_rows(dist: &DegreeDistribution, n: usize, seeds: &[u64]) -> Result<Vec<GraphMetrics>> {
    seeds
        .iter()
        .map(|&seed| Ok(graph_metrics(&generate(dist, n, seed)?)))
        .collect()
}

/// One family of four networks compared under proportional and constant vaccination.
#[derive(Clone, Debug)]
pub struct Suite {
    pub name: &'static str,
    pub networks: Vec<(&'static str, Family)>,
    /// `xi` of the constant mode.
    pub constant_xi: f64,
}

/// The four networks at mean degree 5 and the four at matched `R0`.
pub fn reference_suites() -> [Suite; 2] {
    [
        Suite {
            name: "mean_degree_5",
            networks: vec![
                ("poisson", Family::poisson(5.0)),
                ("bimodal", Family::bimodal(3.0, 13, 0.8)),
                ("regular", Family::regular(5)),
                ("powerlaw", Family::power_law(1.474, 100.0, Some(50))),
            ],
            constant_xi: 5.0,
        },
        Suite {
            name: "matched_r0",
            networks: vec![
                ("poisson", Family::poisson(5.0)),
                ("bimodal", Family::bimodal(3.0, 8, 0.73)),
                ("regular", Family::regular(6)),
                ("powerlaw", Family::power_law(2.0, 20.0, Some(50))),
            ],
            constant_xi: 1.0,
        },
    ]
}

/// File name and contents.
type NamedCsv = (String, Vec<u8>);

/// Network legs run in parallel; files are written afterwards in a fixed order.
fn reproduce(sc: &Scenario, run: &mut Runner) -> Result<()> {
    let params = sc.params();
    let sched = sc.schedule()?;
    let costs = sc.costs();
    let grid = tau_grid(params.horizon, sc.optimize.tau_points);
    let tau = match sc.policy {
        PolicySpec::Threshold { tau } => Some(tau),
        _ => None,
    };
    for suite in reference_suites() {
        let legs: Vec<(&str, &Family, &str, Xi)> = suite
            .networks
            .iter()
            .flat_map(|(label, fam)| {
                [
                    (*label, fam, "deg", Xi::proportional()),
                    (*label, fam, "const", Xi::constant(suite.constant_xi)),
                ]
            })
            .collect();
        let start = Instant::now();
        let files: Vec<Result<Vec<NamedCsv>>> = legs
            .par_iter()
            .map(|(label, fam, mode, xi)| {
                let dist = DegreeDistribution::build(fam)?;
                let stem = format!("{}_{label}_{mode}", suite.name);
                let tr = solve_fluid(&dist, xi, &sched, &params)?;
                let mut out = vec![(format!("{stem}_trajectory.csv"), csv_bytes(|w| tr.write_csv(w))?)];
                let rep = optimize_threshold(&dist, xi, &params, &costs, &grid)?;
                out.push((format!("{stem}_cost.csv"), csv_bytes(|w| rep.write_csv(w))?));
                if let (Some(tau), true) = (tau, xi.is_proportional()) {
                    let fs = final_sizes(&dist, &params, tau, params.nu, &tr)?;
                    out.push((
                        format!("{stem}_final_size.csv"),
                        csv_bytes(|w| write_final_sizes(w, &[fs]))?,
                    ));
                }
                Ok(out)
            })
            .collect();
        for leg in files {
            for (name, bytes) in leg? {
                run.emit(&name, &bytes)?;
            }
        }
        run.manifest
            .timings_s
            .insert(format!("{}_fluid", suite.name), start.elapsed().as_secs_f64());

        let mut table = String::from(EpidemicIndicators::CSV_HEADER);
        table.push('\n');
        for (label, fam) in &suite.networks {
            let ind = r0(&DegreeDistribution::build(fam)?, params.r, params.gamma)?;
            table += &ind.csv_row(label, params.r, params.gamma);
            table.push('\n');
        }
        run.emit(&format!("{}_indicators.csv", suite.name), table.as_bytes())?;

        if let Some(m) = sc.metrics {
            let seeds: Vec<u64> = (0..m.replicas as u64).map(|j| m.seed + j).collect();
            for s in &seeds {
                if !run.manifest.seeds.contains(s) {
                    run.manifest.seeds.push(*s);
                }
            }
            let start = Instant::now();
            let mut table = String::from(GraphMetrics::CSV_HEADER);
            table.push('\n');
            for (label, fam) in &suite.networks {
                let rows = metrics_rows(&DegreeDistribution::build(fam)?, m.n, &seeds)?;
                for (seed, gm) in seeds.iter().zip(&rows) {
                    table += &gm.csv_row(label, m.n, *seed);
                    table.push('\n');
                }
            }
            run.emit(&format!("{}_metrics.csv", suite.name), table.as_bytes())?;
            run.manifest
                .timings_s
                .insert(format!("{}_metrics", suite.name), start.elapsed().as_secs_f64());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"distribution = { family = "poisson", params = { lambda = 5.0 } }"#;

    #[test]
    fn minimal_file_gets_defaults() {
        let sc = parse_str(MINIMAL).unwrap();
        assert_eq!(sc.epidemic.dt, 1e-3);
        assert_eq!(sc.sweep.damping, 0.5);
        assert_eq!(sc.policy, PolicySpec::None);
        assert_eq!(sc.xi, XiSpec::Proportional);
        assert_eq!(sc.params(), EpidemicParams::default());
    }

    #[test]
    fn epsilon_bound_is_reported_with_line() {
        let src = format!("{MINIMAL}\n[epidemic]\nepsilon = 0.6\n");
        let err = parse_str(&src).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("0 < ε < 1/2") && msg.contains("line 3"), "{msg}");
        assert_eq!(exit_code(&err), 1);
    }

    #[test]
    fn unknown_keys_fail() {
        for src in [
            format!("{MINIMAL}\n[epidemic]\ngama = 1.0\n"),
            format!("{MINIMAL}\ncolour = 1\n"),
            r#"distribution = { family = "poisson", params = { lambda = 5.0, mu = 1 } }"#.to_string(),
            r#"distribution = { family = "gaussian", params = { lambda = 5.0 } }"#.to_string(),
            format!("{MINIMAL}\n[xi]\nkind = \"constant\"\nvalue = 1.0\nextra = 2\n"),
        ] {
            let err = parse_str(&src).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{src}: {err}");
            assert!(err.to_string().contains("line"), "{err}");
        }
    }

    #[test]
    fn scenario_round_trips() {
        let src = r#"
name = "everything"
distribution = { family = "power_law", params = { exponent = 2.0, cutoff = 20.0, max_degree = 50 } }
[epidemic]
nu = 0.3
horizon = 10.0
[xi]
kind = "affine"
a = 0.5
b = 1.0
[policy]
kind = "schedule"
starts = [0.0, 2.0]
values = [0.3, 0.1]
[costs]
c_i = 50
c_v = 10
[best_response]
degrees = [1, 2, 3]
[simulation]
n = 500
replicas = 3
"#;
        let sc = parse_str(src).unwrap();
        let again = parse_str(&sc.to_toml().unwrap()).unwrap();
        assert_eq!(sc, again);
        assert_eq!(sc.hash().unwrap(), again.hash().unwrap());
    }

    #[test]
    fn bad_values_are_validation_errors() {
        for src in [
            format!("{MINIMAL}\n[epidemic]\nnu = 0.1\n[policy]\nkind = \"schedule\"\nstarts = [0.0]\nvalues = [0.5]\n"),
            format!("{MINIMAL}\n[policy]\nkind = \"threshold\"\ntau = 40.0\n"),
            format!("{MINIMAL}\n[xi]\nkind = \"table\"\nvalues = [2.0, 1.0]\n"),
            format!("{MINIMAL}\n[costs]\nc_v = -1.0\n"),
            r#"distribution = { family = "poisson", params = { lambda = -1.0 } }"#.to_string(),
        ] {
            let err = parse_str(&src).unwrap_err();
            assert!(err.is_validation(), "{src}: {err}");
        }
    }

    #[test]
    fn locate_finds_keys() {
        let src = "a = 1\n[epidemic]\n  horizon = 3\nx = { lambda = 2 }\n";
        assert_eq!(locate(src, "T"), Some(3));
        assert_eq!(locate(src, "lambda"), Some(4));
        assert_eq!(locate(src, "missing"), None);
    }

    fn scenario_dir() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
    }

    fn quick(src: &str) -> Scenario {
        let mut sc = parse_str(src).unwrap();
        sc.epidemic.dt = 1e-2;
        sc
    }

    #[test]
    fn bundled_scenarios_parse_and_round_trip() {
        let mut seen = 0;
        for entry in fs::read_dir(scenario_dir()).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "toml") {
                let sc = parse_scenario(&path).unwrap();
                assert_eq!(parse_str(&sc.to_toml().unwrap()).unwrap(), sc, "{}", path.display());
                seen += 1;
            }
        }
        assert!(seen >= 5);
        let fig = parse_scenario(&scenario_dir().join("bimodal_fig4a.toml")).unwrap();
        assert_eq!((fig.epidemic.nu, fig.costs.c_v, fig.costs.c_i), (0.2, 10.0, 50.0));
    }

    #[test]
    fn fluid_output_is_byte_identical_and_listed() {
        let sc = quick(&format!("{MINIMAL}\n[epidemic]\nnu = 0.2\nhorizon = 5.0\n[policy]\nkind = \"threshold\"\ntau = 1.0\n"));
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ov = Overrides { check_steps: true, ..Default::default() };
        let m = run(Command::Fluid, &sc, &ov, a.path()).unwrap();
        run(Command::Fluid, &sc, &ov, b.path()).unwrap();
        let read = |d: &Path| fs::read(d.join("trajectory.csv")).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
        let mut listed = m.files.clone();
        listed.sort();
        let mut present: Vec<String> = fs::read_dir(a.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        present.sort();
        assert_eq!(listed, present);
        assert!(m.diagnostics["step_doubling"] < 1e-6);
    }

    #[test]
    fn final_size_reports_r0() {
        let sc = quick(MINIMAL);
        let dir = tempfile::tempdir().unwrap();
        run(Command::FinalSize, &sc, &Overrides::default(), dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("indicators.csv")).unwrap();
        let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
        assert!((row[3].parse::<f64>().unwrap() - 3.75).abs() < 1e-9);
        let sc = quick(&format!("{MINIMAL}\n[xi]\nkind = \"constant\"\nvalue = 1.0\n"));
        let err = run(Command::FinalSize, &sc, &Overrides::default(), dir.path()).unwrap_err();
        assert_eq!(exit_code(&err), 1);
    }

    #[test]
    fn optimize_on_bimodal_scenario_trades_infections_for_vaccinations() {
        let mut sc = parse_scenario(&scenario_dir().join("bimodal_fig4a.toml")).unwrap();
        sc.optimize.tau_points = 41;
        let dir = tempfile::tempdir().unwrap();
        let ov = Overrides { dt: Some(1e-2), ..Default::default() };
        run(Command::Optimize, &sc, &ov, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("cost_curve.csv")).unwrap();
        assert!(text.starts_with("tau,cost,R_inf,V_inf\n"));
        let r_inf: Vec<f64> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
            .collect();
        assert_eq!(r_inf.len(), 41);
        assert!(r_inf.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn unconverged_sweep_is_a_numerical_failure() {
        let mut sc = quick(&format!("{MINIMAL}\n[epidemic]\nnu = 0.2\nhorizon = 5.0\n[costs]\nc_i = 50.0\nc_v = 10.0\n"));
        sc.sweep.max_iter = 1;
        let dir = tempfile::tempdir().unwrap();
        let err = run(Command::Sweep, &sc, &Overrides::default(), dir.path()).unwrap_err();
        assert_eq!(exit_code(&err), 2);
        assert!(dir.path().join("sweep.csv").exists());
        assert!(dir.path().join(RunManifest::FILE).exists());
    }

    #[test]
    fn seed_override_reaches_simulation_and_metrics() {
        let sc = quick(&format!(
            "{MINIMAL}\n[epidemic]\nhorizon = 2.0\n[simulation]\nn = 200\nreplicas = 2\n[metrics]\nn = 50\nreplicas = 2\n"
        ));
        let dir = tempfile::tempdir().unwrap();
        let ov = Overrides { seed: Some(42), ..Default::default() };
        let m = run(Command::Simulate, &sc, &ov, dir.path()).unwrap();
        assert_eq!(m.seeds, vec![42, 43]);
        let m = run(Command::Metrics, &sc, &ov, dir.path()).unwrap();
        assert_eq!(m.seeds, vec![42, 43]);
        assert_eq!(fs::read_to_string(dir.path().join("metrics.csv")).unwrap().lines().count(), 3);
    }
}
