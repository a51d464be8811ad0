//! SIR epidemics with degree-dependent vaccination on configuration-model
//! networks.
//!
//! The crate cross-checks three descriptions of the same process:
//! an exact stochastic simulation on an explicit graph ([`stoch`]), the
//! deterministic fluid limit ([`fluid`]) and analytic final-size results
//! ([`finalsize`]). [`control`] solves the vaccination optimization problems
//! on top of the fluid layer, and [`cli`] drives everything from scenario files.

pub mod cli;
pub mod control;
pub mod degree;
pub mod error;
pub mod finalsize;
pub mod fluid;
pub mod netgen;
pub mod policy;
pub mod rng;
pub mod stoch;


pub use degree::{DegreeDistribution, Family, GFunction, GPartial, Xi};
pub use error::{Error, Result};
pub use fluid::{EpidemicParams, FluidState, Trajectory};
pub use policy::{Schedule, VaccinationPolicy};
