//! Configuration-model graphs: degree sequences, uniform half-edge matching
//! and the structural metrics reported for each network family.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::degree::DegreeDistribution;
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_MAX_ATTEMPTS: usize = 200;

/// Sources handled per parallel work item; fixed so reductions do not depend
/// on the thread count.
const SOURCE_CHUNK: usize = 64;

/// `n` i.i.d. degrees; an odd total is fixed by redrawing one uniformly
/// chosen coordinate until the parity flips.
pub fn sample_degree_sequence(dist: &DegreeDistribution, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::param("n", format!("need at least 2 nodes, got {n}")));
    }
    let pmf = dist.pmf();
    let has_odd = pmf.iter().skip(1).step_by(2).any(|&p| p > 0.0);
    let has_even = pmf.iter().step_by(2).any(|&p| p > 0.0);
    let sampler = WeightedIndex::new(pmf).map_err(|e| Error::param("pmf", e.to_string()))?;
    let mut rng = rng::stream(seed, rng::DEGREES);
    let mut degrees: Vec<usize> = (0..n).map(|_| sampler.sample(&mut rng)).collect();
    if degrees.iter().sum::<usize>() % 2 == 1 {
        if !(has_odd && has_even) {
            return Err(Error::InfeasibleDegrees(format!(
                "{} with n = {n} always has an odd degree sum",
                dist.label()
            )));
        }
        let idx = rng.random_range(0..n);
        let old = degrees[idx] % 2;
        loop {
            let k = sampler.sample(&mut rng);
            if k % 2 != old {
                degrees[idx] = k;
                break;
            }
        }
    }
    Ok(degrees)
}

fn check_sequence(degrees: &[usize]) -> Result<()> {
    let n = degrees.len();
    let total: usize = degrees.iter().sum();
    if total % 2 == 1 {
        return Err(Error::InfeasibleDegrees(format!("odd degree sum {total}")));
    }
    if let Some(&d) = degrees.iter().max() {
        if d >= n {
            return Err(Error::InfeasibleDegrees(format!(
                "max degree {d} >= n = {n}"
            )));
        }
    }
    Ok(())
}

/// Uniform perfect matching of half-edges, possibly with loops and multi-edges.
pub fn random_matching<R: Rng + ?Sized>(degrees: &[usize], rng: &mut R) -> Vec<(usize, usize)> {
    let mut stubs: Vec<usize> = degrees
        .iter()
        .enumerate()
        .flat_map(|(u, &d)| std::iter::repeat_n(u, d))
        .collect();
    stubs.shuffle(rng);
    stubs.chunks_exact(2).map(|c| (c[0], c[1])).collect()
}

/// Simple undirected graph in compressed adjacency form.
#[derive(Clone, Debug)]
pub struct ConfigGraph {
    offsets: Vec<usize>,
    targets: Vec<u32>,
    /// Degree sequence the graph was built from.
    pub requested: Vec<usize>,
    /// The first accepted matching had no loops or multi-edges.
    pub simple: bool,
    /// Half-edges removed by the erasure fallback.
    pub erased_stubs: usize,
    pub attempts_used: usize,
}

impl ConfigGraph {
    /// Builds from an edge list, dropping loops and duplicate edges.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut adj: Vec<Vec<u32>> = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u != v {
                adj[u].push(v as u32);
                adj[v].push(u as u32);
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
            targets.extend_from_slice(list);
            offsets.push(targets.len());
        }
        let requested = (0..n).map(|u| offsets[u + 1] - offsets[u]).collect();
        Self {
            offsets,
            targets,
            requested,
            simple: true,
            erased_stubs: 0,
            attempts_used: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn m(&self) -> usize {
        self.targets.len() / 2
    }

    pub fn degree(&self, u: usize) -> usize {
        self.offsets[u + 1] - self.offsets[u]
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n()).map(|u| self.degree(u)).collect()
    }

    /// Sorted neighbour list.
    pub fn neighbors(&self, u: usize) -> &[u32] {
        &self.targets[self.offsets[u]..self.offsets[u + 1]]
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n()).flat_map(move |u| {
            self.neighbors(u)
                .iter()
                .map(move |&v| (u, v as usize))
                .filter(|&(u, v)| u < v)
        })
    }

    /// One `u v` pair per line, 0-indexed, `u < v`.
    pub fn write_edge_list<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (u, v) in self.edges() {
            writeln!(w, "{u} {v}")?;
        }
        Ok(())
    }
}

fn is_simple(n: usize, pairs: &[(usize, usize)], scratch: &mut Vec<Vec<u32>>) -> bool {
    if pairs.iter().any(|&(u, v)| u == v) {
        return false;
    }
    scratch.iter_mut().for_each(Vec::clear);
    scratch.resize(n, Vec::new());
    for &(u, v) in pairs {
        scratch[u].push(v as u32);
        scratch[v].push(u as u32);
    }
    scratch.iter_mut().all(|l| {
        l.sort_unstable();
        l.windows(2).all(|w| w[0] != w[1])
    })
}

/// Configuration model: rematch from scratch until simple, at most
/// `max_attempts` times, then erase loops and collapse multi-edges of the
/// last matching.
pub fn build_config_model(degrees: &[usize], seed: u64, max_attempts: usize) -> Result<ConfigGraph> {
    check_sequence(degrees)?;
    let n = degrees.len();
    let mut rng = rng::stream(seed, rng::MATCHING);
    let mut scratch = Vec::new();
    let mut pairs = Vec::new();
    for attempt in 1..=max_attempts.max(1) {
        pairs = random_matching(degrees, &mut rng);
        if is_simple(n, &pairs, &mut scratch) {
            let mut g = ConfigGraph::from_edges(n, &pairs);
            g.requested = degrees.to_vec();
            g.attempts_used = attempt;
            return Ok(g);
        }
    }
    let mut g = ConfigGraph::from_edges(n, &pairs);
    g.requested = degrees.to_vec();
    g.simple = false;
    g.erased_stubs = degrees.iter().sum::<usize>() - 2 * g.m();
    g.attempts_used = max_attempts.max(1);
    Ok(g)
}

/// Samples degrees and builds the graph from one base seed.
pub fn generate(dist: &DegreeDistribution, n: usize, seed: u64) -> Result<ConfigGraph> {
    let degrees = sample_degree_sequence(dist, n, seed)?;
    build_config_model(&degrees, seed, DEFAULT_MAX_ATTEMPTS)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphMetrics {
    /// Mean over nodes of betweenness divided by `(n-1)(n-2)/2`.
    pub mean_betweenness: f64,
    pub density: f64,
    /// Mean local clustering, zero for nodes of degree below two.
    pub mean_clustering: f64,
    /// Mean closeness over reachable nodes, scaled by the reachable fraction.
    pub mean_closeness: f64,
}

impl GraphMetrics {
    pub const CSV_HEADER: &'static str = "label,n,seed,betweenness,density,clustering,closeness";

    pub fn csv_row(&self, label: &str, n: usize, seed: u64) -> String {
        format!(
            "{label},{n},{seed},{},{},{},{}",
            self.mean_betweenness, self.density, self.mean_clustering, self.mean_closeness
        )
    }
}

pub fn density(g: &ConfigGraph) -> f64 {
    let n = g.n() as f64;
    if n < 2.0 {
        return 0.0;
    }
    2.0 * g.m() as f64 / (n * (n - 1.0))
}

pub fn local_clustering(g: &ConfigGraph) -> Vec<f64> {
    let n = g.n();
    let mut mark = vec![usize::MAX; n];
    (0..n)
        .map(|u| {
            let d = g.degree(u);
            if d < 2 {
                return 0.0;
            }
            for &v in g.neighbors(u) {
                mark[v as usize] = u;
            }
            let mut links = 0usize;
            for &v in g.neighbors(u) {
                links += g
                    .neighbors(v as usize)
                    .iter()
                    .filter(|&&w| mark[w as usize] == u)
                    .count();
            }
            links as f64 / (d * (d - 1)) as f64
        })
        .collect()
}

struct Bfs {
    dist: Vec<u32>,
    sigma: Vec<f64>,
    delta: Vec<f64>,
    order: Vec<u32>,
}

impl Bfs {
    fn new(n: usize) -> Self {
        Self {
            dist: vec![u32::MAX; n],
            sigma: vec![0.0; n],
            delta: vec![0.0; n],
            order: Vec::with_capacity(n),
        }
    }

    /// Shortest-path counts from `s`; returns `(reachable, distance sum)`.
    fn run(&mut self, g: &ConfigGraph, s: usize, count_paths: bool) -> (usize, u64) {
        for &v in &self.order {
            self.dist[v as usize] = u32::MAX;
        }
        self.order.clear();
        self.dist[s] = 0;
        self.sigma[s] = 1.0;
        self.order.push(s as u32);
        let mut head = 0;
        let mut total = 0u64;
        while head < self.order.len() {
            let v = self.order[head] as usize;
            head += 1;
            let dv = self.dist[v];
            total += dv as u64;
            for &w in g.neighbors(v) {
                let w = w as usize;
                if self.dist[w] == u32::MAX {
                    self.dist[w] = dv + 1;
                    self.sigma[w] = 0.0;
                    self.order.push(w as u32);
                }
                if count_paths && self.dist[w] == dv + 1 {
                    self.sigma[w] += self.sigma[v];
                }
            }
        }
        (self.order.len() - 1, total)
    }

    /// Brandes dependency accumulation over successors, added into `acc`.
    fn accumulate(&mut self, g: &ConfigGraph, s: usize, acc: &mut [f64]) {
        for &v in self.order.iter().rev() {
            let v = v as usize;
            let dv = self.dist[v];
            let mut d = 0.0;
            for &w in g.neighbors(v) {
                let w = w as usize;
                if self.dist[w] == dv + 1 {
                    d += self.sigma[v] / self.sigma[w] * (1.0 + self.delta[w]);
                }
            }
            self.delta[v] = d;
            if v != s {
                acc[v] += d;
            }
        }
    }
}

fn closeness_of(reachable: usize, total: u64, n: usize) -> f64 {
    if total == 0 || n < 2 {
        return 0.0;
    }
    let r = reachable as f64;
    (r / total as f64) * (r / (n - 1) as f64)
}

/// Per-node normalized betweenness and closeness, parallel over sources.
fn path_metrics(g: &ConfigGraph, with_betweenness: bool) -> (Vec<f64>, Vec<f64>) {
    let n = g.n();
    let sources: Vec<usize> = (0..n).collect();
    let partials: Vec<(Vec<f64>, Vec<(usize, f64)>)> = sources
        .par_chunks(SOURCE_CHUNK)
        .map(|chunk| {
            let mut bfs = Bfs::new(n);
            let mut acc = if with_betweenness { vec![0.0; n] } else { Vec::new() };
            let mut close = Vec::with_capacity(chunk.len());
            for &s in chunk {
                let (reach, total) = bfs.run(g, s, with_betweenness);
                close.push((s, closeness_of(reach, total, n)));
                if with_betweenness {
                    bfs.accumulate(g, s, &mut acc);
                }
            }
            (acc, close)
        })
        .collect();
    let mut betweenness = vec![0.0; if with_betweenness { n } else { 0 }];
    let mut closeness = vec![0.0; n];
    for (acc, close) in partials {
        for (b, a) in betweenness.iter_mut().zip(&acc) {
            *b += a;
        }
        for (s, c) in close {
            closeness[s] = c;
        }
    }
    // each unordered pair is visited from both ends
    let norm = if n > 2 { ((n - 1) * (n - 2)) as f64 } else { 1.0 };
    betweenness.iter_mut().for_each(|b| *b /= norm);
    (betweenness, closeness)
}

pub fn betweenness(g: &ConfigGraph) -> Vec<f64> {
    path_metrics(g, true).0
}

pub fn closeness(g: &ConfigGraph) -> Vec<f64> {
    path_metrics(g, false).1
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn mean_closeness(g: &ConfigGraph) -> f64 {
    mean(&closeness(g))
}

pub fn graph_metrics(g: &ConfigGraph) -> GraphMetrics {
    let (b, c) = path_metrics(g, true);
    GraphMetrics {
        mean_betweenness: mean(&b),
        density: density(g),
        mean_clustering: if g.n() < 3 { 0.0 } else { mean(&local_clustering(g)) },
        mean_closeness: mean(&c),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degree::Family;
    use std::collections::HashMap;

    fn dist(f: Family) -> DegreeDistribution {
        DegreeDistribution::build(&f).unwrap()
    }

    fn complete(n: usize) -> ConfigGraph {
        let mut e = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                e.push((u, v));
            }
        }
        ConfigGraph::from_edges(n, &e)
    }

    #[test]
    fn degree_sequence_examples() {
        assert_eq!(
            sample_degree_sequence(&dist(Family::regular(5)), 4, 1).unwrap(),
            vec![5, 5, 5, 5]
        );
        let p = dist(Family::poisson(5.0));
        let a = sample_degree_sequence(&p, 10_000, 7).unwrap();
        let b = sample_degree_sequence(&p, 10_000, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().sum::<usize>() % 2, 0);
        let mean = a.iter().sum::<usize>() as f64 / a.len() as f64;
        assert!((mean - 5.0).abs() < 3.0 * (5.0f64 / 1e4).sqrt(), "mean {mean}");
        assert!(sample_degree_sequence(&p, 1, 0).is_err());
        assert!(sample_degree_sequence(&dist(Family::regular(5)), 3, 0).is_err());
    }

    #[test]
    fn parity_fix_keeps_sum_even() {
        let p = dist(Family::poisson(2.5));
        for seed in 0..200 {
            let d = sample_degree_sequence(&p, 11, seed).unwrap();
            assert_eq!(d.iter().sum::<usize>() % 2, 0);
        }
    }

    #[test]
    fn config_model_examples() {
        let g = build_config_model(&[2, 2, 2], 3, 200).unwrap();
        assert!(g.simple);
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 1), (0, 2), (1, 2)]);
        assert!(matches!(
            build_config_model(&[3, 1], 0, 10),
            Err(Error::InfeasibleDegrees(_))
        ));
        assert!(build_config_model(&[1, 2], 0, 10).is_err());
    }

    #[test]
    fn erasure_fallback_records_deficit() {
        // a 2-node sequence with a double edge can never be simple
        let g = build_config_model(&[1, 1, 2, 2], 0, 1).unwrap();
        for u in 0..4 {
            assert!(g.degree(u) <= g.requested[u]);
        }
        assert_eq!(2 * g.m() + g.erased_stubs, 6);
        assert_eq!(g.simple, g.erased_stubs == 0);
    }

    #[test]
    fn simple_graphs_preserve_degrees() {
        let p = dist(Family::regular(3));
        for seed in 0..20 {
            let d = sample_degree_sequence(&p, 50, seed).unwrap();
            let g = build_config_model(&d, seed, 200).unwrap();
            if g.simple {
                assert_eq!(g.degrees(), d);
            } else {
                assert!(g.degrees().iter().zip(&d).all(|(a, b)| a <= b));
            }
        }
    }

    #[test]
    fn matching_is_uniform_on_small_sequence() {
        let degrees = [1usize, 1, 2, 2];
        let canon = |pairs: &[(usize, usize)]| {
            let mut e: Vec<(usize, usize)> = pairs.iter().map(|&(u, v)| (u.min(v), u.max(v))).collect();
            e.sort_unstable();
            e
        };
        // exact oracle: enumerate all 15 perfect matchings of the 6 stubs
        let stubs = [0usize, 1, 2, 2, 3, 3];
        fn matchings(rest: &[usize], acc: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
            if rest.is_empty() {
                out.push(acc.clone());
                return;
            }
            for j in 1..rest.len() {
                let mut next: Vec<usize> = rest[1..].to_vec();
                next.remove(j - 1);
                acc.push((rest[0], rest[j]));
                matchings(&next, acc, out);
                acc.pop();
            }
        }
        let mut all = Vec::new();
        matchings(&stubs, &mut Vec::new(), &mut all);
        assert_eq!(all.len(), 15);
        let mut expected: HashMap<Vec<(usize, usize)>, f64> = HashMap::new();
        for m in &all {
            *expected.entry(canon(m)).or_default() += 1.0 / 15.0;
        }

        let trials = 100_000;
        let mut rng = rng::stream(42, 0);
        let mut seen: HashMap<Vec<(usize, usize)>, usize> = HashMap::new();
        for _ in 0..trials {
            *seen.entry(canon(&random_matching(&degrees, &mut rng))).or_default() += 1;
        }
        assert_eq!(seen.len(), expected.len());
        for (k, p) in expected {
            let count = seen[&k] as f64;
            let sd = (trials as f64 * p * (1.0 - p)).sqrt();
            assert!((count - trials as f64 * p).abs() < 3.0 * sd + 1.0, "{k:?}: {count} vs {p}");
        }
    }

    #[test]
    fn simple_acceptance_rate_matches_asymptotic_formula() {
        // P(simple) -> exp(-m/2 - m^2/4), m = E[k(k-1)]/E[k] = 2 on 3-regular graphs
        let degrees = vec![3usize; 1000];
        let mut rng = rng::stream(9, 0);
        let mut scratch = Vec::new();
        let trials = 2000;
        let hits = (0..trials)
            .filter(|_| is_simple(1000, &random_matching(&degrees, &mut rng), &mut scratch))
            .count();
        let p = (-1.0f64 - 1.0).exp();
        let sd = (p * (1.0 - p) / trials as f64).sqrt();
        let frac = hits as f64 / trials as f64;
        assert!((frac - p).abs() < 4.0 * sd + 0.01, "{frac} vs {p}");
    }

    #[test]
    fn metrics_examples() {
        let k5 = graph_metrics(&complete(5));
        assert_eq!(k5.density, 1.0);
        assert_eq!(k5.mean_clustering, 1.0);
        assert_eq!(k5.mean_betweenness, 0.0);
        assert_eq!(k5.mean_closeness, 1.0);

        let p3 = ConfigGraph::from_edges(3, &[(0, 1), (1, 2)]);
        assert_eq!(betweenness(&p3), vec![0.0, 1.0, 0.0]);
        let c = closeness(&p3);
        assert!((c[0] - 2.0 / 3.0).abs() < 1e-15 && c[1] == 1.0);
        assert_eq!(graph_metrics(&ConfigGraph::from_edges(2, &[(0, 1)])).mean_clustering, 0.0);
    }

    #[test]
    fn closeness_scales_by_reachable_fraction() {
        // two disjoint edges: each node reaches one node at distance 1 out of n - 1 = 3
        let g = ConfigGraph::from_edges(4, &[(0, 1), (2, 3)]);
        for c in closeness(&g) {
            assert!((c - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn betweenness_matches_brute_force() {
        // oracle: count shortest paths by BFS from every pair on a small random graph
        let d = sample_degree_sequence(&dist(Family::poisson(3.0)), 30, 5).unwrap();
        let g = build_config_model(&d, 5, 200).unwrap();
        let n = g.n();
        let bfs_dist = |s: usize| {
            let mut dist = vec![usize::MAX; n];
            let mut q = std::collections::VecDeque::from([s]);
            dist[s] = 0;
            while let Some(v) = q.pop_front() {
                for &w in g.neighbors(v) {
                    if dist[w as usize] == usize::MAX {
                        dist[w as usize] = dist[v] + 1;
                        q.push_back(w as usize);
                    }
                }
            }
            dist
        };
        let dists: Vec<Vec<usize>> = (0..n).map(bfs_dist).collect();
        let count = |s: usize, t: usize| -> f64 {
            // number of shortest s-t paths by DP over distance layers
            let mut c = vec![0.0; n];
            c[s] = 1.0;
            let mut order: Vec<usize> = (0..n).filter(|&v| dists[s][v] != usize::MAX).collect();
            order.sort_by_key(|&v| dists[s][v]);
            for &v in &order {
                for &w in g.neighbors(v) {
                    if dists[s][w as usize] == dists[s][v] + 1 {
                        c[w as usize] += c[v];
                    }
                }
            }
            c[t]
        };
        let mut oracle = vec![0.0; n];
        for s in 0..n {
            for t in s + 1..n {
                if dists[s][t] == usize::MAX {
                    continue;
                }
                let total = count(s, t);
                for v in 0..n {
                    if v != s && v != t && dists[s][v].checked_add(dists[v][t]) == Some(dists[s][t]) {
                        oracle[v] += count(s, v) * count(v, t) / total;
                    }
                }
            }
        }
        let norm = ((n - 1) * (n - 2)) as f64 / 2.0;
        for (b, o) in betweenness(&g).iter().zip(&oracle) {
            assert!((b - o / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_do_not_depend_on_thread_count() {
        let g = generate(&dist(Family::poisson(4.0)), 500, 3).unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        assert_eq!(one.install(|| graph_metrics(&g)), three.install(|| graph_metrics(&g)));
    }

    #[test]
    fn edge_list_dump() {
        let g = ConfigGraph::from_edges(3, &[(0, 1), (1, 2)]);
        let mut buf = Vec::new();
        g.write_edge_list(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "0 1\n1 2\n");
    }
}
