//! Reference estimators: the pooled (oracle) sieve fit and fixed-effect
//! inverse-variance meta-analysis of per-site fits.

use nalgebra::DMatrix;

use crate::basis::BasisConfig;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::likelihood::{Need, ParamVector, SiteData};
use crate::renewable::{fit_local, solve_local, spd_inverse, CoefficientRow, FitReport};
use crate::solver::SolverConfig;

/// Sieve MLE on pooled data with inverse observed information as covariance.
pub fn oracle_fit(pooled: &SiteData, basis: &BasisConfig, solver: &SolverConfig) -> Result<FitReport> {
    let (lik, outcome) = solve_local(pooled, basis, solver)?;
    let info = lik
        .evaluate(outcome.solution.as_slice(), Need { information: true, ..Need::LOGLIK })?
        .information
        .expect("requested");
    let covariance = spd_inverse(&info, "observed information")?;
    let zeta = ParamVector::from_slice(outcome.solution.as_slice(), pooled.n_covariates());
    Ok(FitReport::from_covariance(
        &pooled.covariate_names,
        &zeta,
        covariance,
        pooled.len(),
        pooled.events(),
        1,
    ))
}

/// Pools the sites first. All sites must share a column contract.
pub fn oracle_fit_sites(sites: &[SiteData], basis: &BasisConfig, solver: &SolverConfig) -> Result<FitReport> {
    let pooled = SiteData::pooled(sites)?;
    let mut report = oracle_fit(&pooled, basis, solver)?;
    report.sites = sites.len();
    Ok(report)
}

/// One site's contribution to a meta-analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaSite {
    pub beta: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub converged: bool,
    pub n: usize,
    pub events: usize,
}

impl MetaSite {
    /// Local fit with inverse observed information. Failures of any kind
    /// (no events, non-convergence, singular information) mark the site as
    /// not converged so it drops out of the combination.
    pub fn fit(site: &SiteData, basis: &BasisConfig, solver: &SolverConfig) -> Self {
        let r = site.n_covariates();
        let failed = || MetaSite {
            beta: vec![f64::NAN; r],
            covariance: DMatrix::from_element(r, r, f64::NAN),
            converged: false,
            n: site.len(),
            events: site.events(),
        };
        let Ok(payload) = fit_local(site, basis, solver) else {
            return failed();
        };
        let Ok(cov) = spd_inverse(&payload.h_cum, "site information") else {
            return failed();
        };
        MetaSite {
            beta: payload.zeta.beta.clone(),
            covariance: cov.view((0, 0), (r, r)).into_owned(),
            converged: true,
            n: site.len(),
            events: site.events(),
        }
    }
}

/// Per-site inputs to [`meta_combine`].
#[derive(Debug, Clone, PartialEq)]
pub struct MetaInput {
    pub covariate_names: Vec<String>,
    pub sites: Vec<MetaSite>,
}

impl MetaInput {
    pub fn fit_sites(sites: &[SiteData], basis: &BasisConfig, solver: &SolverConfig, exec: Execution) -> Result<Self> {
        let names = sites
            .first()
            .map(|s| s.covariate_names.clone())
            .unwrap_or_default();
        if let Some(s) = sites.iter().find(|s| s.covariate_names != names) {
            return Err(Error::Protocol(format!(
                "covariate columns differ: {:?} vs {:?}",
                s.covariate_names, names
            )));
        }
        let fitted = exec.map_indices(sites.len(), |k| MetaSite::fit(&sites[k], basis, solver));
        Ok(Self {
            covariate_names: names,
            sites: fitted,
        })
    }
}

/// Coefficient-wise inverse-variance weighted mean of the converged sites.
pub fn meta_combine(input: &MetaInput) -> Result<FitReport> {
    let r = input.covariate_names.len();
    let used: Vec<&MetaSite> = input.sites.iter().filter(|s| s.converged).collect();
    if used.is_empty() {
        return Err(Error::InvalidConfig("no converged sites to combine".into()));
    }
    for s in &used {
        if s.beta.len() != r || s.covariance.nrows() != r || s.covariance.ncols() != r {
            return Err(Error::DimensionMismatch {
                what: "meta-analysis site estimate",
                expected: r,
                found: s.beta.len(),
            });
        }
    }
    let mut coefficients = Vec::with_capacity(r);
    let mut variances = Vec::with_capacity(r);
    for i in 0..r {
        let mut wsum = 0.0;
        let mut acc = 0.0;
        for s in &used {
            let w = 1.0 / s.covariance[(i, i)];
            wsum += w;
            acc += w * s.beta[i];
        }
        coefficients.push(CoefficientRow::new(input.covariate_names[i].clone(), acc / wsum, wsum.sqrt().recip()));
        variances.push(1.0 / wsum);
    }
    Ok(FitReport {
        coefficients,
        gamma: Vec::new(),
        covariance: DMatrix::from_diagonal(&nalgebra::DVector::from_vec(variances)),
        n: used.iter().map(|s| s.n).sum(),
        events: used.iter().map(|s| s.events).sum(),
        sites: used.len(),
        excluded_sites: input.sites.len() - used.len(),
    })
}
