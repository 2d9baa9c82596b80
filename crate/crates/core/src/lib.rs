//! Distributed Cox proportional-hazards regression by sieve maximum
//! likelihood.
//!
//! The log baseline hazard is a Bernstein polynomial on a fixed support
//! `[0, b]`, so the full likelihood has finitely many parameters and no risk
//! sets. Sites are visited in sequence; each one solves a renewable score
//! equation using only the previous site's [`renewable::SummaryPayload`]
//! (current estimate plus cumulative sensitivity and variability matrices)
//! and its own records.
//!
//! ```no_run
//! use colsa::{BasisConfig, SolverConfig, VarianceMode};
//! # fn sites() -> Vec<colsa::SiteData> { unimplemented!() }
//! let basis = BasisConfig::new(3, 30.0);
//! let solver = SolverConfig::default();
//! let sites = sites();
//! let mut payload = colsa::fit_local(&sites[0], &basis, &solver)?;
//! for site in &sites[1..] {
//!     payload = colsa::renew(&payload, site, &solver)?;
//! }
//! let report = colsa::finalize(&payload, VarianceMode::Variability)?;
//! # Ok::<(), colsa::Error>(())
//! ```

pub mod basis;
pub mod comparators;
pub mod datagen;
pub mod error;
pub mod exec;
pub mod harness;
pub mod io;
pub mod likelihood;
pub mod renewable;
pub mod solver;

pub use basis::{BasisConfig, BernsteinBasis, GaussLegendre};
pub use comparators::{meta_combine, oracle_fit, oracle_fit_sites, MetaInput, MetaSite};
pub use error::{Error, Result};
pub use exec::Execution;
pub use likelihood::{ParamVector, SiteData, SiteLikelihood, SubjectRecord};
pub use renewable::{
    finalize, fit_local, renew, renew_with_contract, run_chain, select_degree, survival_curve, FitReport,
    SummaryPayload, VarianceMode,
};
pub use solver::{newton_solve, SolverConfig};
