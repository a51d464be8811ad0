//! Degree distributions, their generating functions and the two-argument
//! susceptible generating function `g(alpha, theta)`.
//!
//! A [`DegreeDistribution`] is a normalized pmf on `0..=k_max`. Everything the
//! fluid equations need from the network enters through
//!
//! ```text
//! psi(z)          = sum_k p_k z^k
//! g(alpha, theta) = S0 * sum_k p_k alpha^k theta^xi(k)
//! ```
//!
//! and their partial derivatives, which are exact finite sums here.

use crate::error::{Error, Result};

/// Cumulative tail mass left out when truncating an unbounded family.
pub const TAIL_MASS: f64 = 1e-10;

/// Poisson tails are cut far below [`TAIL_MASS`] so that low moments are
/// exact to rounding.
const POISSON_TAIL: f64 = 1e-17;

/// A degree law family with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Family {
    Poisson {
        lambda: f64,
    },
    /// Mixture `p * Poisson(lambda) + (1 - p) * delta(high)`.
    Bimodal {
        lambda: f64,
        high: usize,
        p: f64,
    },
    Regular {
        degree: usize,
    },
    /// `p_k ∝ k^-exponent * exp(-k / cutoff)` on `k >= 1`.
    ///
    /// With `max_degree = None` the support is cut where the unnormalized
    /// tail drops below [`TAIL_MASS`]; otherwise it is capped at `max_degree`.
    PowerLaw {
        exponent: f64,
        cutoff: f64,
        max_degree: Option<usize>,
    },
}

impl Family {
    pub fn poisson(lambda: f64) -> Self {
        Family::Poisson { lambda }
    }

    pub fn bimodal(lambda: f64, high: usize, p: f64) -> Self {
        Family::Bimodal { lambda, high, p }
    }

    pub fn regular(degree: usize) -> Self {
        Family::Regular { degree }
    }

    pub fn power_law(exponent: f64, cutoff: f64, max_degree: Option<usize>) -> Self {
        Family::PowerLaw {
            exponent,
            cutoff,
            max_degree,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Family::Poisson { lambda } => format!("poisson({lambda})"),
            Family::Bimodal { lambda, high, p } => format!("bimodal({lambda},{high},{p})"),
            Family::Regular { degree } => format!("regular({degree})"),
            Family::PowerLaw {
                exponent,
                cutoff,
                max_degree: Some(m),
            } => format!("powerlaw({exponent},{cutoff},max={m})"),
            Family::PowerLaw {
                exponent, cutoff, ..
            } => format!("powerlaw({exponent},{cutoff})"),
        }
    }
}

/// Probability mass function over node degrees `0..=k_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct DegreeDistribution {
    pmf: Vec<f64>,
    label: String,
}

impl DegreeDistribution {
    pub fn build(family: &Family) -> Result<Self> {
        let pmf = match *family {
            Family::Poisson { lambda } => {
                positive("lambda", lambda)?;
                poisson_pmf(lambda)
            }
            Family::Bimodal { lambda, high, p } => {
                positive("lambda", lambda)?;
                if high == 0 {
                    return Err(Error::param("high", "must be > 0"));
                }
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::param("p", format!("{p} outside [0, 1]")));
                }
                let low = poisson_pmf(lambda);
                let mut pmf = vec![0.0; low.len().max(high + 1)];
                for (k, v) in low.iter().enumerate() {
                    pmf[k] += p * v;
                }
                pmf[high] += 1.0 - p;
                pmf
            }
            Family::Regular { degree } => {
                if degree == 0 {
                    return Err(Error::param("degree", "must be > 0"));
                }
                let mut pmf = vec![0.0; degree + 1];
                pmf[degree] = 1.0;
                pmf
            }
            Family::PowerLaw {
                exponent,
                cutoff,
                max_degree,
            } => {
                positive("exponent", exponent)?;
                positive("cutoff", cutoff)?;
                if max_degree == Some(0) {
                    return Err(Error::param("max_degree", "must be > 0"));
                }
                power_law_pmf(exponent, cutoff, max_degree)
            }
        };
        Self::from_pmf(pmf, family.label())
    }

    /// Wraps an explicit pmf, trimming trailing zeros and renormalizing.
    pub fn from_pmf(mut pmf: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::param("pmf", "entries must be finite and >= 0"));
        }
        while pmf.last() == Some(&0.0) {
            pmf.pop();
        }
        let total: f64 = pmf.iter().sum();
        if pmf.is_empty() || total <= 0.0 {
            return Err(Error::param("pmf", "empty support"));
        }
        pmf.iter_mut().for_each(|p| *p /= total);
        let dist = Self {
            pmf,
            label: label.into(),
        };
        if dist.mean() <= 0.0 {
            return Err(Error::param("pmf", "mean degree must be > 0"));
        }
        Ok(dist)
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn k_max(&self) -> usize {
        self.pmf.len() - 1
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn mean(&self) -> f64 {
        self.factorial_moment(1)
    }

    /// `E[k (k-1) ... (k-order+1)]`, i.e. the `order`-th derivative of psi at 1.
    pub fn factorial_moment(&self, order: u32) -> f64 {
        self.psi_unchecked(1.0, order)
    }

    /// Derivative of order `order` of the probability generating function.
    pub fn psi(&self, z: f64, order: u32) -> Result<f64> {
        if !(0.0..=1.0).contains(&z) {
            return Err(Error::param("z", format!("{z} outside [0, 1]")));
        }
        Ok(self.psi_unchecked(z, order))
    }

    pub(crate) fn psi_unchecked(&self, z: f64, order: u32) -> f64 {
        let m = order as usize;
        self.pmf
            .iter()
            .enumerate()
            .skip(m)
            .map(|(k, p)| p * falling(k as f64, order) * z.powi((k - m) as i32))
            .sum()
    }

    /// `(psi(z), psi'(z), psi''(z))` in a single pass.
    pub fn psi_jet(&self, z: f64) -> [f64; 3] {
        let mut out = [0.0; 3];
        let mut zk = 1.0; // z^(k-2) once k >= 2
        for (k, &p) in self.pmf.iter().enumerate() {
            let kf = k as f64;
            match k {
                0 => out[0] += p,
                1 => {
                    out[0] += p * z;
                    out[1] += p;
                }
                _ => {
                    out[0] += p * zk * z * z;
                    out[1] += p * kf * zk * z;
                    out[2] += p * kf * (kf - 1.0) * zk;
                    zk *= z;
                }
            }
        }
        out
    }

    /// Degree law of the endpoint of a uniformly chosen half-edge.
    pub fn size_biased(&self) -> Result<Self> {
        let mean = self.mean();
        if mean <= 0.0 {
            return Err(Error::param("pmf", "zero mean degree"));
        }
        let pmf = self
            .pmf
            .iter()
            .enumerate()
            .map(|(k, p)| k as f64 * p / mean)
            .collect();
        Self::from_pmf(pmf, format!("size_biased({})", self.label))
    }
}

fn positive(name: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::param(name, format!("must be > 0, got {v}")))
    }
}

/// Falling factorial `x (x-1) ... (x-n+1)`.
pub(crate) fn falling(x: f64, n: u32) -> f64 {
    (0..n).map(|j| x - j as f64).product()
}

fn poisson_pmf(lambda: f64) -> Vec<f64> {
    let ln_l = lambda.ln();
    let mut pmf = Vec::new();
    let mut k = 0usize;
    loop {
        let lp = -lambda + k as f64 * ln_l - libm::lgamma(k as f64 + 1.0);
        let p = lp.exp();
        pmf.push(p);
        if k as f64 > lambda + 1.0 && p < 1e-20 {
            break;
        }
        k += 1;
    }
    truncate_tail(pmf, POISSON_TAIL)
}

fn truncate_tail(mut pmf: Vec<f64>, tail_mass: f64) -> Vec<f64> {
    // smallest K with sum_{j > K} p_j < tail_mass
    let mut tail = 0.0;
    let mut cut = pmf.len() - 1;
    for k in (0..pmf.len()).rev() {
        if tail + pmf[k] >= tail_mass {
            cut = k;
            break;
        }
        tail += pmf[k];
    }
    pmf.truncate(cut + 1);
    pmf
}

fn power_law_pmf(exponent: f64, cutoff: f64, max_degree: Option<usize>) -> Vec<f64> {
    let term = |k: usize| (k as f64).powf(-exponent) * (-(k as f64) / cutoff).exp();
    let k_max = match max_degree {
        Some(m) => m,
        None => {
            let ratio = 1.0 / (1.0 - (-1.0 / cutoff).exp());
            let mut k = 1usize;
            // term(k+1) * (1 + q + q^2 + ...) bounds the tail beyond k
            while term(k + 1) * ratio >= TAIL_MASS {
                k += 1;
            }
            k
        }
    };
    let mut pmf = vec![0.0; k_max + 1];
    for (k, p) in pmf.iter_mut().enumerate().skip(1) {
        *p = term(k);
    }
    pmf
}

/// Degree weight of the vaccination rate, `pi_t(k) = xi(k) * pi_t`.
#[derive(Clone, Debug, PartialEq)]
pub enum Xi {
    /// `xi(k) = a k + b`.
    Affine { a: f64, b: f64 },
    /// `xi(k) = values[k]`; must cover the whole degree support.
    Tabulated(Vec<f64>),
}

impl Xi {
    /// Degree-proportional (acquaintance-style) vaccination.
    pub fn proportional() -> Self {
        Xi::Affine { a: 1.0, b: 0.0 }
    }

    pub fn constant(b: f64) -> Self {
        Xi::Affine { a: 0.0, b }
    }

    pub fn value(&self, k: usize) -> f64 {
        match self {
            Xi::Affine { a, b } => a * k as f64 + b,
            Xi::Tabulated(v) => v[k.min(v.len() - 1)],
        }
    }

    /// Checks `xi >= 0` and nondecreasing on `0..=k_max`.
    pub fn validate(&self, k_max: usize) -> Result<()> {
        if let Xi::Tabulated(v) = self {
            if v.len() <= k_max {
                return Err(Error::param(
                    "xi",
                    format!("table has {} entries, support needs {}", v.len(), k_max + 1),
                ));
            }
        }
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=k_max {
            let x = self.value(k);
            if !x.is_finite() || x < 0.0 {
                return Err(Error::param("xi", format!("xi({k}) = {x} must be >= 0")));
            }
            if x < prev {
                return Err(Error::param("xi", format!("xi decreases at k = {k}")));
            }
            prev = x;
        }
        Ok(())
    }

    pub fn as_affine(&self) -> Option<(f64, f64)> {
        match *self {
            Xi::Affine { a, b } => Some((a, b)),
            Xi::Tabulated(_) => None,
        }
    }

    pub fn is_proportional(&self) -> bool {
        matches!(*self, Xi::Affine { a, b } if a == 1.0 && b == 0.0)
    }
}

/// Which partial derivative of `g` to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GPartial {
    Value,
    DAlpha,
    DTheta,
    DAlphaAlpha,
    DAlphaTheta,
}

impl GPartial {
    fn orders(self) -> (u32, u32) {
        match self {
            GPartial::Value => (0, 0),
            GPartial::DAlpha => (1, 0),
            GPartial::DTheta => (0, 1),
            GPartial::DAlphaAlpha => (2, 0),
            GPartial::DAlphaTheta => (1, 1),
        }
    }
}

/// All partial derivatives of `g` up to total order three at one point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GJet {
    pub g: f64,
    pub ga: f64,
    pub gt: f64,
    pub gaa: f64,
    pub gat: f64,
    pub gtt: f64,
    pub gaaa: f64,
    pub gaat: f64,
    pub gatt: f64,
}

/// `g(alpha, theta) = S0 * sum_k p_k alpha^k theta^xi(k)`.
#[derive(Clone, Debug)]
pub struct GFunction {
    weights: Vec<f64>,
    xi: Vec<f64>,
}

impl GFunction {
    pub fn new(dist: &DegreeDistribution, xi: &Xi, s0: f64) -> Result<Self> {
        if !(s0 > 0.0 && s0 <= 1.0) {
            return Err(Error::param("S0", format!("{s0} outside (0, 1]")));
        }
        xi.validate(dist.k_max())?;
        Ok(Self {
            weights: dist.pmf().iter().map(|p| s0 * p).collect(),
            xi: (0..=dist.k_max()).map(|k| xi.value(k)).collect(),
        })
    }

    pub fn s0(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn k_max(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn xi(&self) -> &[f64] {
        &self.xi
    }

    /// `S0 * p_k`, the initial susceptible measure.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn eval(&self, alpha: f64, theta: f64, which: GPartial) -> Result<f64> {
        check_unit("alpha", alpha)?;
        check_unit("theta", theta)?;
        let (m, n) = which.orders();
        Ok(self.partial(alpha, theta, m, n))
    }

    /// `d^m/dalpha^m d^n/dtheta^n g`, no argument checks.
    pub fn partial(&self, alpha: f64, theta: f64, m: u32, n: u32) -> f64 {
        let ln_theta = theta.ln();
        let mut sum = 0.0;
        for (k, (&w, &x)) in self.weights.iter().zip(&self.xi).enumerate() {
            if w == 0.0 || k < m as usize {
                continue;
            }
            let c = falling(k as f64, m) * falling(x, n);
            if c == 0.0 {
                continue;
            }
            sum += w * c * alpha.powi(k as i32 - m as i32) * ((x - n as f64) * ln_theta).exp();
        }
        sum
    }

    /// Every partial up to order three in one sweep over the support.
    pub fn jet(&self, alpha: f64, theta: f64) -> GJet {
        let ln_theta = theta.ln();
        let inv_theta = 1.0 / theta;
        let mut j = GJet::default();
        let mut a_pow = 1.0; // alpha^k
        let inv_alpha = if alpha > 0.0 { 1.0 / alpha } else { 0.0 };
        for (k, (&w, &x)) in self.weights.iter().zip(&self.xi).enumerate() {
            if k > 0 {
                a_pow *= alpha;
            }
            if w == 0.0 {
                continue;
            }
            let kf = k as f64;
            // alpha^(k-m) for m = 0..3; zero-coefficient terms are skipped below
            let a1 = if k >= 1 { alpha.powi(k as i32 - 1) } else { 0.0 };
            let a2 = if k >= 2 { a1 * inv_alpha } else { 0.0 };
            let a3 = if k >= 3 { a2 * inv_alpha } else { 0.0 };
            let t0 = (x * ln_theta).exp();
            let t1 = t0 * inv_theta;
            let t2 = t1 * inv_theta;
            let k1 = kf;
            let k2 = kf * (kf - 1.0);
            let k3 = k2 * (kf - 2.0);
            let x1 = x;
            let x2 = x * (x - 1.0);
            j.g += w * a_pow * t0;
            j.ga += w * k1 * a1 * t0;
            j.gt += w * a_pow * x1 * t1;
            j.gaa += w * k2 * a2 * t0;
            j.gat += w * k1 * a1 * x1 * t1;
            j.gtt += w * a_pow * x2 * t2;
            j.gaaa += w * k3 * a3 * t0;
            j.gaat += w * k2 * a2 * x1 * t1;
            j.gatt += w * k1 * a1 * x2 * t2;
        }
        j
    }
}

fn check_unit(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 + 1e-12 {
        Ok(())
    } else {
        Err(Error::param(name, format!("{v} outside (0, 1]")))
    }
}
