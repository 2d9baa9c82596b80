//! Full (not partial) log-likelihood of the Cox model with a Bernstein log
//! baseline hazard, its score, observed information and variability matrix.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{dot, BasisConfig, BernsteinBasis, HazardIntegrals, MAX_DEGREE};
use crate::error::{Error, Result};
use crate::exec::{Execution, CHUNK_LEN};

/// One right-censored observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub x: Vec<f64>,
    /// Observed time `min(T, C)`.
    pub time: f64,
    /// `true` when the event was observed.
    pub event: bool,
}

impl SubjectRecord {
    pub fn new(x: Vec<f64>, time: f64, event: bool) -> Self {
        Self { x, time, event }
    }
}

/// Records from one site together with the covariate column contract.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SiteData {
    pub covariate_names: Vec<String>,
    pub records: Vec<SubjectRecord>,
}

impl SiteData {
    pub fn new(covariate_names: Vec<String>, records: Vec<SubjectRecord>) -> Self {
        Self {
            covariate_names,
            records,
        }
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn events(&self) -> usize {
        self.records.iter().filter(|r| r.event).count()
    }

    pub fn total_time(&self) -> f64 {
        self.records.iter().map(|r| r.time).sum()
    }

    /// Concatenate sites that share a column contract.
    pub fn pooled<'a, I>(sites: I) -> Result<SiteData>
    where
        I: IntoIterator<Item = &'a SiteData>,
    {
        let mut iter = sites.into_iter();
        let mut out = match iter.next() {
            Some(first) => first.clone(),
            None => return Ok(SiteData::default()),
        };
        for site in iter {
            if site.covariate_names != out.covariate_names {
                return Err(Error::Protocol(format!(
                    "covariate columns differ: {:?} vs {:?}",
                    site.covariate_names, out.covariate_names
                )));
            }
            out.records.extend(site.records.iter().cloned());
        }
        Ok(out)
    }

    pub fn validate(&self, basis: &BasisConfig) -> Result<()> {
        validate_records(&self.records, self.n_covariates(), basis)
    }
}

pub fn validate_records(records: &[SubjectRecord], r: usize, basis: &BasisConfig) -> Result<()> {
    for (index, rec) in records.iter().enumerate() {
        if rec.x.len() != r {
            return Err(Error::InvalidRecord {
                index,
                reason: format!("expected {r} covariates, found {}", rec.x.len()),
            });
        }
        if let Some(v) = rec.x.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidRecord {
                index,
                reason: format!("non-finite covariate value {v}"),
            });
        }
        if !rec.time.is_finite() || rec.time < basis.lower || rec.time > basis.upper {
            return Err(Error::InvalidRecord {
                index,
                reason: format!(
                    "time {} outside the basis support [{}, {}]",
                    rec.time, basis.lower, basis.upper
                ),
            });
        }
    }
    Ok(())
}

/// `ζ = (β, γ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl ParamVector {
    pub fn new(beta: Vec<f64>, gamma: Vec<f64>) -> Self {
        Self { beta, gamma }
    }

    pub fn zeros(r: usize, n_basis: usize) -> Self {
        Self::new(vec![0.0; r], vec![0.0; n_basis])
    }

    pub fn dim(&self) -> usize {
        self.beta.len() + self.gamma.len()
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.beta.iter().chain(&self.gamma).copied())
    }

    pub fn from_slice(values: &[f64], r: usize) -> Self {
        Self::new(values[..r].to_vec(), values[r..].to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.beta.iter().chain(&self.gamma).all(|v| v.is_finite())
    }
}

/// Which derivative blocks to accumulate alongside the log-likelihood.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Need {
    pub score: bool,
    pub information: bool,
    pub variability: bool,
}

impl Need {
    pub const LOGLIK: Need = Need {
        score: false,
        information: false,
        variability: false,
    };
    pub const NEWTON: Need = Need {
        score: true,
        information: true,
        variability: false,
    };
    pub const ALL: Need = Need {
        score: true,
        information: true,
        variability: true,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loglik: f64,
    pub score: Option<DVector<f64>>,
    pub information: Option<DMatrix<f64>>,
    pub variability: Option<DMatrix<f64>>,
}

/// Likelihood evaluator for a validated set of records.
#[derive(Debug, Clone)]
pub struct SiteLikelihood<'a> {
    basis: BernsteinBasis,
    records: &'a [SubjectRecord],
    r: usize,
    exec: Execution,
}

impl<'a> SiteLikelihood<'a> {
    pub fn new(records: &'a [SubjectRecord], r: usize, cfg: &BasisConfig) -> Result<Self> {
        let basis = BernsteinBasis::new(*cfg)?;
        validate_records(records, r, cfg)?;
        Ok(Self {
            basis,
            records,
            r,
            exec: Execution::default(),
        })
    }

    pub fn from_site(site: &'a SiteData, cfg: &BasisConfig) -> Result<Self> {
        Self::new(&site.records, site.n_covariates(), cfg)
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn dim(&self) -> usize {
        self.r + self.basis.n_basis()
    }

    pub fn n_covariates(&self) -> usize {
        self.r
    }

    pub fn basis(&self) -> &BernsteinBasis {
        &self.basis
    }

    pub fn records(&self) -> &[SubjectRecord] {
        self.records
    }

    fn check_params(&self, zeta: &[f64]) -> Result<()> {
        if zeta.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: self.dim(),
                found: zeta.len(),
            });
        }
        Ok(())
    }

    pub fn loglik(&self, zeta: &[f64]) -> Result<f64> {
        Ok(self.evaluate(zeta, Need::LOGLIK)?.loglik)
    }

    pub fn score(&self, zeta: &[f64]) -> Result<DVector<f64>> {
        let need = Need {
            score: true,
            ..Need::LOGLIK
        };
        Ok(self.evaluate(zeta, need)?.score.expect("score requested"))
    }

    pub fn information(&self, zeta: &[f64]) -> Result<DMatrix<f64>> {
        let need = Need {
            information: true,
            ..Need::LOGLIK
        };
        Ok(self.evaluate(zeta, need)?.information.expect("information requested"))
    }

    pub fn variability(&self, zeta: &[f64]) -> Result<DMatrix<f64>> {
        let need = Need {
            variability: true,
            ..Need::LOGLIK
        };
        Ok(self.evaluate(zeta, need)?.variability.expect("variability requested"))
    }

    /// Per-subject score contributions `U_i(ζ)`.
    pub fn subject_scores(&self, zeta: &[f64]) -> Result<Vec<DVector<f64>>> {
        self.check_params(zeta)?;
        let d = self.dim();
        let mut scratch = Scratch::new(self.basis.n_basis(), d, true, false);
        Ok(self
            .records
            .iter()
            .map(|rec| {
                let mut acc = vec![0.0; 1 + d];
                let need = Need {
                    score: true,
                    ..Need::LOGLIK
                };
                self.accumulate(rec, zeta, need, &mut scratch, &mut acc);
                DVector::from_column_slice(&acc[1..])
            })
            .collect())
    }

    /// Sums the requested quantities over all records in a fixed chunk order.
    pub fn evaluate(&self, zeta: &[f64], need: Need) -> Result<Evaluation> {
        self.check_params(zeta)?;
        let d = self.dim();
        let layout = Layout::new(d, need);
        let partials = self.exec.map_chunks(self.records, CHUNK_LEN, |chunk| {
            let mut acc = vec![0.0; layout.len];
            let mut scratch = Scratch::new(self.basis.n_basis(), d, need.score || need.information || need.variability, need.information);
            for rec in chunk {
                self.accumulate(rec, zeta, need, &mut scratch, &mut acc);
            }
            acc
        });
        let mut total = vec![0.0; layout.len];
        for part in &partials {
            for (t, p) in total.iter_mut().zip(part) {
                *t += p;
            }
        }
        Ok(layout.unpack(&total, d))
    }

    fn accumulate(&self, rec: &SubjectRecord, zeta: &[f64], need: Need, scratch: &mut Scratch, acc: &mut [f64]) {
        let r = self.r;
        let k = self.basis.n_basis();
        let d = r + k;
        let (beta, gamma) = zeta.split_at(r);
        let layout = Layout::new(d, need);

        let eta = dot(&rec.x, beta);
        let m = eta.exp();
        let want_grad = need.score || need.information || need.variability;
        scratch.reset();
        self.basis
            .accumulate_integrals(rec.time, gamma, &mut scratch.ints, want_grad, need.information);
        let cum = scratch.ints.cumulative;

        let b_y = &mut scratch.b_y[..k];
        let mut ll = -cum * m;
        if rec.event {
            self.basis.eval_into(rec.time, b_y);
            ll += eta + dot(b_y, gamma);
        }
        acc[0] += ll;

        if want_grad {
            let u = &mut scratch.u[..d];
            let resid = f64::from(u8::from(rec.event)) - cum * m;
            for (ui, xi) in u[..r].iter_mut().zip(&rec.x) {
                *ui = xi * resid;
            }
            for j in 0..k {
                let obs = if rec.event { b_y[j] } else { 0.0 };
                u[r + j] = obs - scratch.ints.gradient[j] * m;
            }
            if need.score {
                for (a, ui) in acc[layout.score..layout.score + d].iter_mut().zip(u.iter()) {
                    *a += ui;
                }
            }
            if need.variability {
                let v = &mut acc[layout.variability..layout.variability + d * d];
                for i in 0..d {
                    let ui = u[i];
                    for j in i..d {
                        v[i * d + j] += ui * u[j];
                    }
                }
            }
        }

        if need.information {
            let h = &mut acc[layout.information..layout.information + d * d];
            let cm = cum * m;
            for i in 0..r {
                let xi = rec.x[i];
                for j in i..r {
                    h[i * d + j] += cm * xi * rec.x[j];
                }
                for j in 0..k {
                    h[i * d + r + j] += m * xi * scratch.ints.gradient[j];
                }
            }
            for j in 0..k {
                for l in j..k {
                    h[(r + j) * d + r + l] += m * scratch.ints.hessian[j * k + l];
                }
            }
        }
    }
}

struct Scratch {
    ints: HazardIntegrals,
    b_y: [f64; MAX_DEGREE + 1],
    u: Vec<f64>,
}

impl Scratch {
    fn new(k: usize, d: usize, gradient: bool, hessian: bool) -> Self {
        Self {
            ints: HazardIntegrals {
                cumulative: 0.0,
                gradient: if gradient || hessian { vec![0.0; k] } else { Vec::new() },
                hessian: if hessian { vec![0.0; k * k] } else { Vec::new() },
            },
            b_y: [0.0; MAX_DEGREE + 1],
            u: vec![0.0; d],
        }
    }

    fn reset(&mut self) {
        self.ints.cumulative = 0.0;
        self.ints.gradient.iter_mut().for_each(|v| *v = 0.0);
        self.ints.hessian.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Offsets of each block inside the flat accumulator.
#[derive(Debug, Clone, Copy)]
struct Layout {
    need: Need,
    score: usize,
    information: usize,
    variability: usize,
    len: usize,
}

impl Layout {
    fn new(d: usize, need: Need) -> Self {
        let mut len = 1;
        let score = len;
        if need.score {
            len += d;
        }
        let information = len;
        if need.information {
            len += d * d;
        }
        let variability = len;
        if need.variability {
            len += d * d;
        }
        Self {
            need,
            score,
            information,
            variability,
            len,
        }
    }

    fn unpack(&self, flat: &[f64], d: usize) -> Evaluation {
        let upper_to_sym = |block: &[f64]| {
            DMatrix::from_fn(d, d, |i, j| if i <= j { block[i * d + j] } else { block[j * d + i] })
        };
        Evaluation {
            loglik: flat[0],
            score: self
                .need
                .score
                .then(|| DVector::from_column_slice(&flat[self.score..self.score + d])),
            information: self
                .need
                .information
                .then(|| upper_to_sym(&flat[self.information..self.information + d * d])),
            variability: self
                .need
                .variability
                .then(|| upper_to_sym(&flat[self.variability..self.variability + d * d])),
        }
    }
}

fn evaluator<'a>(zeta: &ParamVector, data: &'a [SubjectRecord], cfg: &BasisConfig) -> Result<SiteLikelihood<'a>> {
    if zeta.gamma.len() != cfg.n_basis() {
        return Err(Error::DimensionMismatch {
            what: "gamma",
            expected: cfg.n_basis(),
            found: zeta.gamma.len(),
        });
    }
    SiteLikelihood::new(data, zeta.beta.len(), cfg)
}

/// `Σ_i [Δ_i(β·x_i + g(y_i)) − Λ(y_i) exp(β·x_i)]`.
pub fn loglik(zeta: &ParamVector, data: &[SubjectRecord], cfg: &BasisConfig) -> Result<f64> {
    evaluator(zeta, data, cfg)?.loglik(zeta.to_dvector().as_slice())
}

pub fn score(zeta: &ParamVector, data: &[SubjectRecord], cfg: &BasisConfig) -> Result<DVector<f64>> {
    evaluator(zeta, data, cfg)?.score(zeta.to_dvector().as_slice())
}

/// Observed information `−∂ score / ∂ζᵀ`.
pub fn information(zeta: &ParamVector, data: &[SubjectRecord], cfg: &BasisConfig) -> Result<DMatrix<f64>> {
    evaluator(zeta, data, cfg)?.information(zeta.to_dvector().as_slice())
}

/// `Σ_i U_i U_iᵀ`.
pub fn variability(zeta: &ParamVector, data: &[SubjectRecord], cfg: &BasisConfig) -> Result<DMatrix<f64>> {
    evaluator(zeta, data, cfg)?.variability(zeta.to_dvector().as_slice())
}
