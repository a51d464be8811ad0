//! Exact continuous-time simulation of SIR-V on an explicit graph.
//!
//! Aggregate-rate Gillespie: infections fire at `r * N_IS`, recoveries at
//! `gamma * I`, vaccinations at `pi_t * sum_{S nodes} xi(k)`. The schedule is
//! piecewise constant, and at each breakpoint the race restarts, which is
//! exact by memorylessness.

use std::io::Write;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;

use crate::degree::DegreeDistribution;
use crate::error::{Error, Result};
use crate::fluid::EpidemicParams;
use crate::netgen::{self, ConfigGraph};
use crate::policy::VaccinationPolicy;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Compartment {
    S,
    I,
    R,
    V,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    Infect,
    Recover,
    Vaccinate,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Infect => "infect",
            EventKind::Recover => "recover",
            EventKind::Vaccinate => "vaccinate",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub t: f64,
    pub kind: EventKind,
    pub node: usize,
}

/// Node and edge counts of a configuration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub s: usize,
    pub i: usize,
    pub r: usize,
    pub v: usize,
    /// Half-edges attached to susceptible nodes.
    pub n_s: usize,
    /// Edges between an infected and a susceptible node; likewise below.
    pub n_is: usize,
    pub n_rs: usize,
    pub n_vs: usize,
}

impl Counts {
    fn as_array(&self) -> [usize; 8] {
        [
            self.s, self.i, self.r, self.v, self.n_s, self.n_is, self.n_rs, self.n_vs,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct SimOptions {
    /// Spacing of the sampled series.
    pub sample_dt: f64,
    pub record_events: bool,
    /// Compare incremental edge counts with a full recount every this many events.
    pub audit_every: Option<usize>,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            sample_dt: 0.05,
            record_events: false,
            audit_every: None,
        }
    }
}

/// Counts sampled on a uniform grid.
#[derive(Clone, Debug, Default)]
pub struct Series {
    pub t: Vec<f64>,
    pub counts: Vec<Counts>,
}

impl Series {
    pub const CSV_HEADER: &'static str = "t,S,I,R,V,N_S,N_IS,N_RS,N_VS";

    /// Column `c` of [`Self::CSV_HEADER`] (after `t`) divided by `n`.
    pub fn fraction(&self, c: usize, n: usize) -> Vec<f64> {
        self.counts
            .iter()
            .map(|x| x.as_array()[c] as f64 / n as f64)
            .collect()
    }

    /// Rows of fractions of `n`, matching the fluid scaling.
    pub fn write_csv<W: Write>(&self, mut w: W, n: usize) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        let nf = n as f64;
        for (t, c) in self.t.iter().zip(&self.counts) {
            write!(w, "{t}")?;
            for v in c.as_array() {
                write!(w, ",{}", v as f64 / nf)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct SimOutput {
    pub series: Series,
    pub events: Vec<Event>,
    pub final_counts: Counts,
    pub final_time: f64,
    pub event_count: usize,
}

impl SimOutput {
    pub fn write_events<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,kind,node")?;
        for e in &self.events {
            writeln!(w, "{},{},{}", e.t, e.kind.as_str(), e.node)?;
        }
        Ok(())
    }
}

const NONE: u32 = u32::MAX;

/// Indexable set of `u32` with O(1) insert and swap-remove.
#[derive(Clone, Debug)]
struct IndexSet {
    items: Vec<u32>,
    pos: Vec<u32>,
}

impl IndexSet {
    fn new(universe: usize) -> Self {
        Self {
            items: Vec::new(),
            pos: vec![NONE; universe],
        }
    }

    fn insert(&mut self, x: u32) {
        debug_assert_eq!(self.pos[x as usize], NONE);
        self.pos[x as usize] = self.items.len() as u32;
        self.items.push(x);
    }

    fn remove(&mut self, x: u32) {
        let p = self.pos[x as usize];
        debug_assert_ne!(p, NONE);
        let last = self.items.pop().unwrap();
        if last != x {
            self.items[p as usize] = last;
            self.pos[last as usize] = p;
        }
        self.pos[x as usize] = NONE;
    }

    fn len(&self) -> usize {
        self.items.len()
    }

    fn get(&self, i: usize) -> u32 {
        self.items[i]
    }
}

/// Simulation state on a fixed graph.
pub struct Simulator<'g> {
    g: &'g ConfigGraph,
    state: Vec<Compartment>,
    /// Adjacency slot offsets, to name directed edges by slot index.
    slot_base: Vec<usize>,
    /// Directed slots `u -> w` with `u` infected and `w` susceptible.
    si: IndexSet,
    infected: IndexSet,
    /// Susceptible nodes grouped by degree.
    by_degree: Vec<IndexSet>,
    xi: Vec<f64>,
    vacc_weight: f64,
    counts: Counts,
    t: f64,
    r: f64,
    gamma: f64,
}

impl<'g> Simulator<'g> {
    /// All nodes susceptible except `infected`.
    pub fn new(
        g: &'g ConfigGraph,
        params: &EpidemicParams,
        policy: &VaccinationPolicy,
        infected: &[usize],
    ) -> Result<Self> {
        let n = g.n();
        let k_max = g.degrees().into_iter().max().unwrap_or(0);
        let xi: Vec<f64> = (0..=k_max).map(|k| policy.xi.value(k)).collect();
        if xi.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::param("xi", "must be >= 0 on the graph's degrees"));
        }
        let mut slot_base = Vec::with_capacity(n + 1);
        slot_base.push(0);
        for u in 0..n {
            slot_base.push(slot_base[u] + g.degree(u));
        }
        let mut sim = Self {
            g,
            state: vec![Compartment::S; n],
            si: IndexSet::new(slot_base[n]),
            infected: IndexSet::new(n),
            by_degree: (0..=k_max).map(|_| IndexSet::new(n)).collect(),
            slot_base,
            xi,
            vacc_weight: 0.0,
            counts: Counts::default(),
            t: 0.0,
            r: params.r,
            gamma: params.gamma,
        };
        for u in 0..n {
            sim.by_degree[g.degree(u)].insert(u as u32);
            sim.vacc_weight += sim.xi[g.degree(u)];
        }
        sim.counts.s = n;
        sim.counts.n_s = 2 * g.m();
        for &u in infected {
            if u >= n {
                return Err(Error::param("infected", format!("node {u} out of range")));
            }
            if sim.state[u] == Compartment::S {
                sim.infect(u);
            }
        }
        Ok(sim)
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn counts(&self) -> Counts {
        self.counts
    }

    pub fn state(&self) -> &[Compartment] {
        &self.state
    }

    pub fn graph(&self) -> &ConfigGraph {
        self.g
    }

    fn slot(&self, u: usize, j: usize) -> u32 {
        (self.slot_base[u] + j) as u32
    }

    /// Slot index of `u -> w` in `u`'s adjacency.
    fn slot_to(&self, u: usize, w: usize) -> u32 {
        let j = self.g.neighbors(u).binary_search(&(w as u32)).unwrap();
        self.slot(u, j)
    }

    fn leave_susceptible(&mut self, v: usize) {
        let k = self.g.degree(v);
        self.by_degree[k].remove(v as u32);
        self.vacc_weight -= self.xi[k];
        self.counts.s -= 1;
        self.counts.n_s -= k;
    }

    fn infect(&mut self, v: usize) {
        self.leave_susceptible(v);
        self.state[v] = Compartment::I;
        self.counts.i += 1;
        self.infected.insert(v as u32);
        for (j, &w) in self.g.neighbors(v).iter().enumerate() {
            let w = w as usize;
            match self.state[w] {
                Compartment::S => {
                    self.si.insert(self.slot(v, j));
                    self.counts.n_is += 1;
                }
                Compartment::I => {
                    let s = self.slot_to(w, v);
                    self.si.remove(s);
                    self.counts.n_is -= 1;
                }
                Compartment::R => self.counts.n_rs -= 1,
                Compartment::V => self.counts.n_vs -= 1,
            }
        }
    }

    fn recover(&mut self, v: usize) {
        self.state[v] = Compartment::R;
        self.counts.i -= 1;
        self.counts.r += 1;
        self.infected.remove(v as u32);
        for (j, &w) in self.g.neighbors(v).iter().enumerate() {
            if self.state[w as usize] == Compartment::S {
                self.si.remove(self.slot(v, j));
                self.counts.n_is -= 1;
                self.counts.n_rs += 1;
            }
        }
    }

    fn vaccinate(&mut self, v: usize) {
        self.leave_susceptible(v);
        self.state[v] = Compartment::V;
        self.counts.v += 1;
        for &w in self.g.neighbors(v) {
            let w = w as usize;
            match self.state[w] {
                Compartment::S => self.counts.n_vs += 1,
                Compartment::I => {
                    let s = self.slot_to(w, v);
                    self.si.remove(s);
                    self.counts.n_is -= 1;
                }
                Compartment::R => self.counts.n_rs -= 1,
                Compartment::V => self.counts.n_vs -= 1,
            }
        }
    }

    /// Counts recomputed by a full scan.
    pub fn recount(&self) -> Counts {
        let mut c = Counts::default();
        for (u, st) in self.state.iter().enumerate() {
            match st {
                Compartment::S => {
                    c.s += 1;
                    c.n_s += self.g.degree(u);
                    for &w in self.g.neighbors(u) {
                        match self.state[w as usize] {
                            Compartment::I => c.n_is += 1,
                            Compartment::R => c.n_rs += 1,
                            Compartment::V => c.n_vs += 1,
                            Compartment::S => {}
                        }
                    }
                }
                Compartment::I => c.i += 1,
                Compartment::R => c.r += 1,
                Compartment::V => c.v += 1,
            }
        }
        c
    }

    fn slot_owner(&self, slot: usize) -> (usize, usize) {
        let u = self.slot_base.partition_point(|&b| b <= slot) - 1;
        (u, self.g.neighbors(u)[slot - self.slot_base[u]] as usize)
    }

    fn pick_vaccinee<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let mut x = rng.random::<f64>() * self.vacc_weight;
        let mut fallback = None;
        for (k, set) in self.by_degree.iter().enumerate() {
            let w = self.xi[k] * set.len() as f64;
            if w <= 0.0 {
                continue;
            }
            fallback = Some(k);
            if x < w {
                return set.get(rng.random_range(0..set.len())) as usize;
            }
            x -= w;
        }
        // roundoff in the running weight lands here
        let set = &self.by_degree[fallback.unwrap()];
        set.get(rng.random_range(0..set.len())) as usize
    }

    /// Advances to the next event before `until`, or to `until` if none
    /// fires first. `pi` must be constant on `[t, until)`.
    pub fn step<R: Rng + ?Sized>(&mut self, pi: f64, until: f64, rng: &mut R) -> Option<Event> {
        let rate_inf = self.r * self.counts.n_is as f64;
        let rate_rec = self.gamma * self.counts.i as f64;
        let rate_vac = if self.counts.s > 0 { pi * self.vacc_weight.max(0.0) } else { 0.0 };
        let total = rate_inf + rate_rec + rate_vac;
        if total <= 0.0 {
            self.t = until;
            return None;
        }
        let wait = Exp::new(total).unwrap().sample(rng);
        if self.t + wait >= until {
            self.t = until;
            return None;
        }
        self.t += wait;
        let u = rng.random::<f64>() * total;
        let (kind, node) = if u < rate_inf && self.si.len() > 0 {
            let slot = self.si.get(rng.random_range(0..self.si.len())) as usize;
            let (_, w) = self.slot_owner(slot);
            self.infect(w);
            (EventKind::Infect, w)
        } else if u < rate_inf + rate_rec && self.infected.len() > 0 {
            let v = self.infected.get(rng.random_range(0..self.infected.len())) as usize;
            self.recover(v);
            (EventKind::Recover, v)
        } else {
            let v = self.pick_vaccinee(rng);
            self.vaccinate(v);
            (EventKind::Vaccinate, v)
        };
        Some(Event {
            t: self.t,
            kind,
            node,
        })
    }

    /// `(mu_S, mu_IS, mu_RS, mu_VS)` divided by `n`; `mu_S` is indexed by
    /// degree, the others by the number of susceptible neighbours.
    pub fn empirical_measures(&self) -> [Vec<f64>; 4] {
        let n = self.g.n();
        let k_max = self.by_degree.len() - 1;
        let mut mu: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; k_max + 1]);
        let inv = 1.0 / n as f64;
        for (u, st) in self.state.iter().enumerate() {
            if *st == Compartment::S {
                mu[0][self.g.degree(u)] += inv;
                continue;
            }
            let ks = self
                .g
                .neighbors(u)
                .iter()
                .filter(|&&w| self.state[w as usize] == Compartment::S)
                .count();
            let idx = match st {
                Compartment::I => 1,
                Compartment::R => 2,
                _ => 3,
            };
            mu[idx][ks] += inv;
        }
        mu
    }
}

/// `sum_i i * mu(i)`, the first moment of a degree-indexed measure.
pub fn first_moment(mu: &[f64]) -> f64 {
    mu.iter().enumerate().map(|(i, m)| i as f64 * m).sum()
}

/// Runs from a given initial infected set to the horizon.
pub fn run_from(
    g: &ConfigGraph,
    params: &EpidemicParams,
    policy: &VaccinationPolicy,
    infected: &[usize],
    seed: u64,
    opts: &SimOptions,
) -> Result<SimOutput> {
    let mut rng = rng::stream(seed, rng::DYNAMICS);
    let mut sim = Simulator::new(g, params, policy, infected)?;
    let horizon = params.horizon;
    if !(opts.sample_dt > 0.0) {
        return Err(Error::param("sample_dt", "must be > 0"));
    }
    let samples = (horizon / opts.sample_dt).round() as usize;
    let grid: Vec<f64> = (0..=samples).map(|j| j as f64 * horizon / samples as f64).collect();
    let mut out = SimOutput::default();
    let mut next = 0;
    let sched = &policy.schedule;
    while sim.t < horizon {
        if sim.counts.i == 0 && sched.is_zero_from(sim.t) {
            break;
        }
        let pi = sched.value(sim.t);
        let until = sched.next_break(sim.t).unwrap_or(horizon).min(horizon);
        let before = sim.counts;
        let ev = sim.step(pi, until, &mut rng);
        let upto = ev.map_or(sim.t, |e| e.t);
        while next < grid.len() && (grid[next] < upto || (ev.is_none() && grid[next] <= upto)) {
            out.series.t.push(grid[next]);
            out.series.counts.push(before);
            next += 1;
        }
        if let Some(e) = ev {
            out.event_count += 1;
            if opts.record_events {
                out.events.push(e);
            }
            if let Some(every) = opts.audit_every {
                if out.event_count % every == 0 && sim.recount() != sim.counts {
                    return Err(Error::Numerical(format!(
                        "edge bookkeeping diverged after {} events",
                        out.event_count
                    )));
                }
            }
        }
    }
    while next < grid.len() {
        out.series.t.push(grid[next]);
        out.series.counts.push(sim.counts);
        next += 1;
    }
    out.final_counts = sim.counts;
    out.final_time = sim.t;
    Ok(out)
}

/// `round(eps n)` initial infected chosen uniformly without replacement.
pub fn initial_infected(n: usize, epsilon: f64, seed: u64) -> Vec<usize> {
    let mut rng = rng::stream(seed, rng::DYNAMICS + 100);
    let count = ((epsilon * n as f64).round() as usize).clamp(1, n);
    let mut v = index::sample(&mut rng, n, count).into_vec();
    v.sort_unstable();
    v
}

pub fn run_sirv(
    g: &ConfigGraph,
    params: &EpidemicParams,
    policy: &VaccinationPolicy,
    seed: u64,
    opts: &SimOptions,
) -> Result<SimOutput> {
    let infected = initial_infected(g.n(), params.epsilon, seed);
    run_from(g, params, policy, &infected, seed, opts)
}

/// Mean and standard error of each sampled column over replicas.
#[derive(Clone, Debug)]
pub struct EnsembleResult {
    pub t: Vec<f64>,
    /// Fractions of `n`, in [`Series::CSV_HEADER`] column order.
    pub mean: [Vec<f64>; 8],
    pub stderr: [Vec<f64>; 8],
    /// Per-replica maximum of `I / n`.
    pub peaks: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl EnsembleResult {
    pub fn peak_mean(&self) -> f64 {
        self.peaks.iter().sum::<f64>() / self.peaks.len() as f64
    }

    pub fn peak_stderr(&self) -> f64 {
        let (m, r) = (self.peak_mean(), self.peaks.len() as f64);
        let var = self.peaks.iter().map(|p| (p - m).powi(2)).sum::<f64>() / (r - 1.0);
        (var / r).sqrt()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let cols = ["S", "I", "R", "V", "N_S", "N_IS", "N_RS", "N_VS"];
        write!(w, "t")?;
        for c in cols {
            write!(w, ",{c},{c}_se")?;
        }
        writeln!(w)?;
        for j in 0..self.t.len() {
            write!(w, "{}", self.t[j])?;
            for c in 0..8 {
                write!(w, ",{},{}", self.mean[c][j], self.stderr[c][j])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Replica `r` draws a fresh graph and run from seed `base_seed + r`.
/// Replicas run in parallel; reduction is sequential in replica order.
pub fn ensemble(
    dist: &DegreeDistribution,
    n: usize,
    params: &EpidemicParams,
    policy: &VaccinationPolicy,
    replicas: usize,
    base_seed: u64,
    opts: &SimOptions,
) -> Result<EnsembleResult> {
    if replicas < 2 {
        return Err(Error::param("replicas", "need at least 2"));
    }
    let seeds: Vec<u64> = (0..replicas as u64).map(|r| base_seed.wrapping_add(r)).collect();
    let runs: Vec<Result<Series>> = seeds
        .par_iter()
        .map(|&seed| {
            let g = netgen::generate(dist, n, seed)?;
            Ok(run_sirv(&g, params, policy, seed, opts)?.series)
        })
        .collect();
    let runs: Vec<Series> = runs.into_iter().collect::<Result<_>>()?;
    Ok(reduce(&runs, n, seeds))
}

fn reduce(runs: &[Series], n: usize, seeds: Vec<u64>) -> EnsembleResult {
    let len = runs[0].t.len();
    let reps = runs.len() as f64;
    let mut mean: [Vec<f64>; 8] = std::array::from_fn(|_| vec![0.0; len]);
    let mut sq: [Vec<f64>; 8] = std::array::from_fn(|_| vec![0.0; len]);
    let nf = n as f64;
    for run in runs {
        for (j, c) in run.counts.iter().enumerate() {
            for (col, v) in c.as_array().into_iter().enumerate() {
                let x = v as f64 / nf;
                mean[col][j] += x;
                sq[col][j] += x * x;
            }
        }
    }
    let mut stderr: [Vec<f64>; 8] = std::array::from_fn(|_| vec![0.0; len]);
    for col in 0..8 {
        for j in 0..len {
            let m = mean[col][j] / reps;
            let var = ((sq[col][j] - reps * m * m) / (reps - 1.0)).max(0.0);
            mean[col][j] = m;
            stderr[col][j] = (var / reps).sqrt();
        }
    }
    let peaks = runs
        .iter()
        .map(|r| r.counts.iter().map(|c| c.i).max().unwrap_or(0) as f64 / nf)
        .collect();
    EnsembleResult {
        t: runs[0].t.clone(),
        mean,
        stderr,
        peaks,
        seeds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degree::{Family, Xi};
    use crate::policy::Schedule;

    fn params(r: f64, gamma: f64, horizon: f64) -> EpidemicParams {
        EpidemicParams {
            r,
            gamma,
            nu: 0.5,
            epsilon: 0.01,
            horizon,
            dt: 1e-3,
        }
    }

    fn no_vacc(horizon: f64) -> VaccinationPolicy {
        VaccinationPolicy::none(Xi::proportional(), horizon).unwrap()
    }

    fn poisson_graph(n: usize, seed: u64) -> ConfigGraph {
        let d = DegreeDistribution::build(&Family::poisson(5.0)).unwrap();
        netgen::generate(&d, n, seed).unwrap()
    }

    #[test]
    fn no_transmission_means_one_recovery() {
        let g = poisson_graph(200, 1);
        let out = run_from(
            &g,
            &params(0.0, 1.0, 1e3),
            &no_vacc(1e3),
            &[7],
            3,
            &SimOptions {
                record_events: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.events.len(), 1);
        assert_eq!(out.events[0].kind, EventKind::Recover);
        assert_eq!(out.final_counts.r, 1);
        assert_eq!(out.final_counts.i, 0);
    }

    #[test]
    fn instant_recovery_stops_spread() {
        let g = poisson_graph(2000, 2);
        let p = params(3.0, 1e6, 10.0);
        let out = run_sirv(&g, &p, &no_vacc(10.0), 4, &SimOptions::default()).unwrap();
        let initial = (0.01f64 * 2000.0).round() as usize;
        assert!(out.final_counts.r >= initial && out.final_counts.r <= initial + 2);
    }

    #[test]
    fn bookkeeping_matches_recount_and_states_are_absorbing() {
        let d = DegreeDistribution::build(&Family::bimodal(3.0, 13, 0.8)).unwrap();
        let g = netgen::generate(&d, 3000, 11).unwrap();
        let p = params(1.5, 1.0, 15.0);
        let policy = VaccinationPolicy::threshold(Xi::proportional(), 5.0, 0.5, 15.0).unwrap();
        let out = run_sirv(
            &g,
            &p,
            &policy,
            11,
            &SimOptions {
                record_events: true,
                audit_every: Some(1000),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(out.event_count > 1000);
        let mut state = vec![Compartment::S; g.n()];
        for u in initial_infected(g.n(), p.epsilon, 11) {
            state[u] = Compartment::I;
        }
        let mut last_t = 0.0;
        for e in &out.events {
            assert!(e.t > last_t);
            last_t = e.t;
            let (from, to) = match e.kind {
                EventKind::Infect => (Compartment::S, Compartment::I),
                EventKind::Recover => (Compartment::I, Compartment::R),
                EventKind::Vaccinate => (Compartment::S, Compartment::V),
            };
            assert_eq!(state[e.node], from);
            state[e.node] = to;
            if e.kind == EventKind::Vaccinate {
                assert!(e.t < 5.0);
            }
        }
        for c in &out.series.counts {
            assert_eq!(c.s + c.i + c.r + c.v, g.n());
        }
    }

    #[test]
    fn incremental_counts_equal_recount_after_each_event() {
        let g = poisson_graph(500, 5);
        let p = params(2.0, 1.0, 20.0);
        let policy = VaccinationPolicy::threshold(Xi::proportional(), 3.0, 0.4, 20.0).unwrap();
        let mut sim = Simulator::new(&g, &p, &policy, &initial_infected(500, 0.02, 5)).unwrap();
        let mut rng = rng::stream(5, 9);
        let mut events = 0;
        while sim.time() < 20.0 {
            let pi = policy.schedule.value(sim.time());
            let until = policy.schedule.next_break(sim.time()).unwrap_or(20.0);
            if sim.step(pi, until, &mut rng).is_some() {
                events += 1;
                assert_eq!(sim.recount(), sim.counts());
                let mu = sim.empirical_measures();
                let n_is = first_moment(&mu[1]) * 500.0;
                assert!((n_is - sim.counts().n_is as f64).abs() < 1e-9);
            }
        }
        assert!(events > 100);
    }

    #[test]
    fn all_susceptible_measures() {
        let g = poisson_graph(300, 6);
        let sim = Simulator::new(&g, &params(1.0, 1.0, 1.0), &no_vacc(1.0), &[]).unwrap();
        let mu = sim.empirical_measures();
        let degrees = g.degrees();
        for (k, m) in mu[0].iter().enumerate() {
            let count = degrees.iter().filter(|&&d| d == k).count();
            assert!((m - count as f64 / 300.0).abs() < 1e-15);
        }
        assert!(mu[1..].iter().all(|m| m.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn initial_edge_mass_is_binomial() {
        let g = poisson_graph(10_000, 8);
        let sim = Simulator::new(
            &g,
            &params(3.0, 1.0, 1.0),
            &no_vacc(1.0),
            &initial_infected(10_000, 0.01, 8),
        )
        .unwrap();
        let mu = sim.empirical_measures();
        let mass = first_moment(&mu[1]);
        // 100 infected nodes with i.i.d. Poisson(5) degrees: sd of the sum is sqrt(500)
        let sd = 500f64.sqrt() / 1e4;
        assert!((mass - 0.05).abs() < 3.0 * sd + 1e-3, "{mass}");
    }

    #[test]
    fn degenerate_chain_has_zero_variance() {
        let d = DegreeDistribution::build(&Family::regular(4)).unwrap();
        let p = EpidemicParams {
            r: 0.0,
            gamma: 0.0,
            nu: 0.0,
            ..params(0.0, 0.0, 5.0)
        };
        let e = ensemble(&d, 200, &p, &no_vacc(5.0), 4, 10, &SimOptions::default()).unwrap();
        assert!(e.stderr.iter().take(4).all(|c| c.iter().all(|&s| s == 0.0)));
        assert!(ensemble(&d, 200, &p, &no_vacc(5.0), 1, 10, &SimOptions::default()).is_err());
    }

    #[test]
    fn ensemble_is_independent_of_thread_count() {
        let d = DegreeDistribution::build(&Family::poisson(5.0)).unwrap();
        let p = params(3.0, 1.0, 6.0);
        let policy = VaccinationPolicy::threshold(Xi::proportional(), 2.0, 0.2, 6.0).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| ensemble(&d, 400, &p, &policy, 6, 77, &SimOptions::default()).unwrap())
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.stderr, b.stderr);
    }

    #[test]
    fn proportional_vaccination_targets_high_degrees() {
        let d = DegreeDistribution::build(&Family::bimodal(3.0, 13, 0.8)).unwrap();
        let g = netgen::generate(&d, 4000, 21).unwrap();
        let p = EpidemicParams {
            r: 0.0,
            ..params(0.0, 1.0, 2.0)
        };
        let policy = VaccinationPolicy::new(Xi::proportional(), Schedule::constant(0.3, 2.0).unwrap());
        let out = run_sirv(
            &g,
            &p,
            &policy,
            21,
            &SimOptions {
                record_events: true,
                ..Default::default()
            },
        )
        .unwrap();
        let vacc: Vec<usize> = out
            .events
            .iter()
            .filter(|e| e.kind == EventKind::Vaccinate)
            .map(|e| g.degree(e.node))
            .collect();
        assert!(vacc.len() > 100);
        let mean_v = vacc.iter().sum::<usize>() as f64 / vacc.len() as f64;
        let mean_all = g.degrees().iter().sum::<usize>() as f64 / g.n() as f64;
        assert!(mean_v > mean_all + 0.5, "{mean_v} vs {mean_all}");
    }

    #[test]
    fn series_csv_shape() {
        let g = poisson_graph(100, 3);
        let out = run_sirv(&g, &params(3.0, 1.0, 1.0), &no_vacc(1.0), 3, &SimOptions::default()).unwrap();
        assert_eq!(out.series.t.len(), 21);
        let mut buf = Vec::new();
        out.series.write_csv(&mut buf, 100).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,S,I,R,V,N_S,N_IS,N_RS,N_VS\n"));
        assert_eq!(text.lines().count(), 22);
    }
}
