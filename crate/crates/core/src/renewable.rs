//! Site-by-site renewable estimation.
//!
//! Site 1 solves its own score equation. Every later site solves
//! `Σ_i U_ki(ζ) + H_cum (ζ̃_{k−1} − ζ) = 0` using only the incoming
//! [`SummaryPayload`], then adds its sensitivity and variability matrices to
//! the running totals before passing the payload on.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::basis::{BasisConfig, BernsteinBasis};
use crate::error::{Error, Result};
use crate::likelihood::{Need, ParamVector, SiteData, SiteLikelihood};
use crate::solver::{newton_solve, EstimatingEquation, Linearization, SolveOutcome, SolverConfig};

pub const SCHEMA_VERSION: &str = "colsa-payload/1";

/// Matrices whose condition number exceeds this are treated as singular.
pub const MAX_CONDITION: f64 = 1e13;

const SYMMETRY_TOL: f64 = 1e-10;

/// Convergence diagnostics for one site's solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSummary {
    pub site: usize,
    pub n: usize,
    pub events: usize,
    pub converged: bool,
    pub iterations: usize,
    pub score_norm: f64,
}

/// The only object that leaves a site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryPayload {
    pub schema_version: String,
    pub basis: BasisConfig,
    pub covariate_names: Vec<String>,
    pub site_count: usize,
    pub n_total: usize,
    pub events_total: usize,
    pub zeta: ParamVector,
    #[serde(with = "matrix_rows")]
    pub h_cum: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub v_cum: DMatrix<f64>,
    pub sites: Vec<SiteSummary>,
}

impl SummaryPayload {
    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn dim(&self) -> usize {
        self.n_covariates() + self.basis.n_basis()
    }

    pub fn validate(&self) -> Result<()> {
        let proto = |msg: String| Err(Error::Protocol(msg));
        if self.schema_version != SCHEMA_VERSION {
            return proto(format!(
                "unsupported schema version {:?}, expected {SCHEMA_VERSION:?}",
                self.schema_version
            ));
        }
        self.basis
            .validate()
            .map_err(|e| Error::Protocol(format!("payload basis: {e}")))?;
        let r = self.n_covariates();
        let d = self.dim();
        if self.zeta.beta.len() != r || self.zeta.gamma.len() != self.basis.n_basis() {
            return proto(format!(
                "parameter vector has ({}, {}) entries, expected ({r}, {})",
                self.zeta.beta.len(),
                self.zeta.gamma.len(),
                self.basis.n_basis()
            ));
        }
        if !self.zeta.is_finite() {
            return proto("parameter vector has non-finite entries".into());
        }
        for (name, m) in [("H_cum", &self.h_cum), ("V_cum", &self.v_cum)] {
            if m.nrows() != d || m.ncols() != d {
                return proto(format!("{name} is {}x{}, expected {d}x{d}", m.nrows(), m.ncols()));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return proto(format!("{name} has non-finite entries"));
            }
            let asym = (m - m.transpose()).amax();
            if asym > SYMMETRY_TOL * (1.0 + m.amax()) {
                return proto(format!("{name} is not symmetric (max deviation {asym:e})"));
            }
        }
        if self.site_count == 0 || self.sites.len() != self.site_count {
            return proto(format!(
                "site counter {} does not match {} site records",
                self.site_count,
                self.sites.len()
            ));
        }
        let n: usize = self.sites.iter().map(|s| s.n).sum();
        let events: usize = self.sites.iter().map(|s| s.events).sum();
        if n != self.n_total || events != self.events_total {
            return proto(format!(
                "counters (N={}, D={}) disagree with site records (N={n}, D={events})",
                self.n_total, self.events_total
            ));
        }
        Ok(())
    }

    /// Fails with a protocol error unless `basis` equals the payload's basis.
    pub fn check_contract(&self, basis: &BasisConfig) -> Result<()> {
        if self.basis != *basis {
            return Err(Error::Protocol(format!(
                "basis mismatch: payload has degree {} on [{}, {}] with {} nodes, expected degree {} on [{}, {}] with {} nodes",
                self.basis.degree,
                self.basis.lower,
                self.basis.upper,
                self.basis.quad_order,
                basis.degree,
                basis.lower,
                basis.upper,
                basis.quad_order
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let payload: SummaryPayload = serde_json::from_str(s)?;
        payload.validate()?;
        Ok(payload)
    }
}

mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_row_iterator(n, m, rows.into_iter().flatten()))
    }
}

/// Score equation of a single dataset, ascending its log-likelihood.
pub(crate) struct LocalEquation<'a> {
    pub lik: SiteLikelihood<'a>,
}

impl EstimatingEquation for LocalEquation<'_> {
    fn merit(&self, zeta: &DVector<f64>) -> f64 {
        self.lik.loglik(zeta.as_slice()).unwrap_or(f64::NAN)
    }

    fn linearize(&self, zeta: &DVector<f64>) -> Linearization {
        let ev = self
            .lik
            .evaluate(zeta.as_slice(), Need::NEWTON)
            .expect("dimensions fixed at construction");
        Linearization {
            merit: ev.loglik,
            value: ev.score.expect("requested"),
            neg_jacobian: ev.information.expect("requested"),
        }
    }
}

/// Local score plus the quadratic pull toward the previous estimate.
struct RenewEquation<'a> {
    lik: SiteLikelihood<'a>,
    prior: DVector<f64>,
    h_cum: &'a DMatrix<f64>,
}

impl EstimatingEquation for RenewEquation<'_> {
    fn merit(&self, zeta: &DVector<f64>) -> f64 {
        let diff = &self.prior - zeta;
        let ll = self.lik.loglik(zeta.as_slice()).unwrap_or(f64::NAN);
        ll - 0.5 * diff.dot(&(self.h_cum * &diff))
    }

    fn linearize(&self, zeta: &DVector<f64>) -> Linearization {
        let ev = self
            .lik
            .evaluate(zeta.as_slice(), Need::NEWTON)
            .expect("dimensions fixed at construction");
        let diff = &self.prior - zeta;
        let pull = self.h_cum * &diff;
        Linearization {
            merit: ev.loglik - 0.5 * diff.dot(&pull),
            value: ev.score.expect("requested") + pull,
            neg_jacobian: ev.information.expect("requested") + self.h_cum,
        }
    }
}

/// `β = 0` and a constant log hazard matching the crude event rate.
pub fn initial_params(site: &SiteData, basis: &BasisConfig) -> Result<ParamVector> {
    let events = site.events();
    if events == 0 {
        return Err(Error::NoEvents);
    }
    let exposure = site.total_time();
    if exposure <= 0.0 {
        return Err(Error::InvalidConfig("total follow-up time is zero".into()));
    }
    let level = (events as f64 / exposure).ln();
    Ok(ParamVector::new(
        vec![0.0; site.n_covariates()],
        vec![level; basis.n_basis()],
    ))
}

/// Maximizes the site's own likelihood. Used for site 1 and by the oracle.
pub(crate) fn solve_local<'a>(
    site: &'a SiteData,
    basis: &BasisConfig,
    solver: &SolverConfig,
) -> Result<(SiteLikelihood<'a>, SolveOutcome)> {
    let init = initial_params(site, basis)?;
    let lik = SiteLikelihood::from_site(site, basis)?;
    let eq = LocalEquation { lik };
    let outcome = newton_solve(&eq, init.to_dvector(), solver)?;
    Ok((eq.lik, outcome))
}

pub fn fit_local(site: &SiteData, basis: &BasisConfig, solver: &SolverConfig) -> Result<SummaryPayload> {
    let (lik, outcome) = solve_local(site, basis, solver)?;
    let ev = lik.evaluate(outcome.solution.as_slice(), Need::ALL)?;
    let r = site.n_covariates();
    Ok(SummaryPayload {
        schema_version: SCHEMA_VERSION.to_string(),
        basis: *basis,
        covariate_names: site.covariate_names.clone(),
        site_count: 1,
        n_total: site.len(),
        events_total: site.events(),
        zeta: ParamVector::from_slice(outcome.solution.as_slice(), r),
        h_cum: ev.information.expect("requested"),
        v_cum: ev.variability.expect("requested"),
        sites: vec![SiteSummary {
            site: 1,
            n: site.len(),
            events: site.events(),
            converged: outcome.converged,
            iterations: outcome.iterations,
            score_norm: outcome.score_norm,
        }],
    })
}

pub fn renew(payload: &SummaryPayload, site: &SiteData, solver: &SolverConfig) -> Result<SummaryPayload> {
    payload.validate()?;
    if site.covariate_names != payload.covariate_names {
        return Err(Error::Protocol(format!(
            "covariate columns {:?} do not match the payload contract {:?}",
            site.covariate_names, payload.covariate_names
        )));
    }
    let basis = payload.basis;
    let lik = SiteLikelihood::from_site(site, &basis)?;
    let eq = RenewEquation {
        lik,
        prior: payload.zeta.to_dvector(),
        h_cum: &payload.h_cum,
    };
    let outcome = newton_solve(&eq, eq.prior.clone(), solver)?;
    let ev = eq.lik.evaluate(outcome.solution.as_slice(), Need::ALL)?;

    let mut next = payload.clone();
    next.site_count += 1;
    next.n_total += site.len();
    next.events_total += site.events();
    next.zeta = ParamVector::from_slice(outcome.solution.as_slice(), payload.n_covariates());
    next.h_cum += ev.information.expect("requested");
    next.v_cum += ev.variability.expect("requested");
    next.sites.push(SiteSummary {
        site: next.site_count,
        n: site.len(),
        events: site.events(),
        converged: outcome.converged,
        iterations: outcome.iterations,
        score_norm: outcome.score_norm,
    });
    Ok(next)
}

/// [`renew`] after checking the payload against the agreed basis.
pub fn renew_with_contract(
    payload: &SummaryPayload,
    site: &SiteData,
    contract: &BasisConfig,
    solver: &SolverConfig,
) -> Result<SummaryPayload> {
    payload.check_contract(contract)?;
    renew(payload, site, solver)
}

/// Runs the whole chain in the given site order.
pub fn run_chain(sites: &[SiteData], basis: &BasisConfig, solver: &SolverConfig) -> Result<SummaryPayload> {
    let (first, rest) = sites
        .split_first()
        .ok_or_else(|| Error::InvalidConfig("no sites supplied".into()))?;
    let mut payload = fit_local(first, basis, solver)?;
    for site in rest {
        payload = renew(&payload, site, solver)?;
    }
    Ok(payload)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// `V_cum⁻¹`
    #[default]
    Variability,
    /// `H_cum⁻¹ V_cum H_cum⁻¹`
    Sandwich,
}

impl FromStr for VarianceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variability" => Ok(VarianceMode::Variability),
            "sandwich" => Ok(VarianceMode::Sandwich),
            other => Err(Error::InvalidConfig(format!(
                "unknown variance mode {other:?} (expected variability or sandwich)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub hazard_ratio: f64,
}

impl CoefficientRow {
    pub fn new(name: impl Into<String>, estimate: f64, std_error: f64) -> Self {
        Self {
            name: name.into(),
            estimate,
            std_error,
            z: estimate / std_error,
            hazard_ratio: estimate.exp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub coefficients: Vec<CoefficientRow>,
    pub gamma: Vec<f64>,
    /// Covariance of the full parameter vector where available; the β block
    /// alone for meta-analysis.
    pub covariance: DMatrix<f64>,
    pub n: usize,
    pub events: usize,
    pub sites: usize,
    pub excluded_sites: usize,
}

impl FitReport {
    pub fn beta(&self) -> Vec<f64> {
        self.coefficients.iter().map(|c| c.estimate).collect()
    }

    pub fn std_errors(&self) -> Vec<f64> {
        self.coefficients.iter().map(|c| c.std_error).collect()
    }

    pub fn params(&self) -> ParamVector {
        ParamVector::new(self.beta(), self.gamma.clone())
    }

    pub(crate) fn from_covariance(
        names: &[String],
        zeta: &ParamVector,
        covariance: DMatrix<f64>,
        n: usize,
        events: usize,
        sites: usize,
    ) -> Self {
        let coefficients = names
            .iter()
            .zip(&zeta.beta)
            .enumerate()
            .map(|(i, (name, &b))| CoefficientRow::new(name.clone(), b, covariance[(i, i)].sqrt()))
            .collect();
        Self {
            coefficients,
            gamma: zeta.gamma.clone(),
            covariance,
            n,
            events,
            sites,
            excluded_sites: 0,
        }
    }
}

/// Inverse of a symmetric positive-definite matrix, refusing ill-conditioned input.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Inference {
            reason: format!("{what} has non-finite entries"),
            condition: f64::INFINITY,
        });
    }
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if condition.is_nan() || condition > MAX_CONDITION {
        return Err(Error::Inference {
            reason: format!("{what} is singular or not positive definite (smallest eigenvalue {min:e})"),
            condition,
        });
    }
    let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v));
    let inv = &eig.eigenvectors * inv_diag * eig.eigenvectors.transpose();
    Ok(0.5 * (&inv + inv.transpose()))
}

pub fn finalize(payload: &SummaryPayload, mode: VarianceMode) -> Result<FitReport> {
    payload.validate()?;
    let covariance = match mode {
        VarianceMode::Variability => spd_inverse(&payload.v_cum, "variability matrix")?,
        VarianceMode::Sandwich => {
            let h_inv = spd_inverse(&payload.h_cum, "sensitivity matrix")?;
            spd_inverse(&payload.v_cum, "variability matrix")?;
            let s = &h_inv * &payload.v_cum * &h_inv;
            0.5 * (&s + s.transpose())
        }
    };
    Ok(FitReport::from_covariance(
        &payload.covariate_names,
        &payload.zeta,
        covariance,
        payload.n_total,
        payload.events_total,
        payload.site_count,
    ))
}

/// `S(t | x) = exp(−Λ̃(t))^{exp(x·β̃)}` on each grid point.
pub fn survival_curve(payload: &SummaryPayload, x: &[f64], grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    if x.len() != payload.n_covariates() {
        return Err(Error::DimensionMismatch {
            what: "covariate vector",
            expected: payload.n_covariates(),
            found: x.len(),
        });
    }
    let basis = BernsteinBasis::new(payload.basis)?;
    let risk: f64 = x.iter().zip(&payload.zeta.beta).map(|(a, b)| a * b).sum::<f64>().exp();
    grid.iter()
        .map(|&t| {
            let cum = basis.cumulative_hazard(t, &payload.zeta.gamma)?;
            Ok((t, (-cum * risk).exp()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AicRow {
    pub degree: usize,
    pub loglik: f64,
    pub aic: f64,
    /// Failure message when the candidate did not converge.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegreeSelection {
    pub chosen: usize,
    pub table: Vec<AicRow>,
}

/// Fits every distinct candidate degree and keeps the lowest
/// `AIC = −2 loglik + 2 (r + p + 1)`, preferring the smaller degree on ties.
pub fn select_degree(
    site: &SiteData,
    candidates: &[usize],
    template: &BasisConfig,
    solver: &SolverConfig,
) -> Result<DegreeSelection> {
    let mut degrees = candidates.to_vec();
    degrees.sort_unstable();
    degrees.dedup();
    if degrees.is_empty() {
        return Err(Error::InvalidConfig("no candidate degrees supplied".into()));
    }
    let r = site.n_covariates();
    let mut table = Vec::with_capacity(degrees.len());
    let mut best: Option<(usize, f64)> = None;
    let mut last_err = None;
    for p in degrees {
        let basis = BasisConfig { degree: p, ..*template };
        match solve_local(site, &basis, solver) {
            Ok((_, outcome)) => {
                let ll = outcome.objective_trace.last().copied().unwrap_or(f64::NAN);
                let aic = -2.0 * ll + 2.0 * (r + p + 1) as f64;
                if best.is_none_or(|(_, a)| aic < a) {
                    best = Some((p, aic));
                }
                table.push(AicRow {
                    degree: p,
                    loglik: ll,
                    aic,
                    failure: None,
                });
            }
            Err(e) if e.is_non_convergence() => {
                table.push(AicRow {
                    degree: p,
                    loglik: f64::NAN,
                    aic: f64::NAN,
                    failure: Some(e.to_string()),
                });
                last_err = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    match best {
        Some((chosen, _)) => Ok(DegreeSelection { chosen, table }),
        None => Err(last_err.expect("at least one candidate failed")),
    }
}
