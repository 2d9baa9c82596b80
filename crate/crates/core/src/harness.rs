//! Monte Carlo replication of the simulation study: generate data, fit every
//! method, and summarize bias, coverage and efficiency per coefficient.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::basis::{BasisConfig, DEFAULT_QUAD_ORDER};
use crate::comparators::{meta_combine, oracle_fit, MetaInput};
use crate::datagen::{calibrate_censoring, gen_dataset, Calibration, SimDataset, SimDesign};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::renewable::{finalize, run_chain, select_degree, VarianceMode};
use crate::solver::SolverConfig;

/// Normal quantile for two-sided 95% intervals.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    Oracle { degree: usize },
    Colsa { degree: usize },
    ColsaAic { candidates: Vec<usize> },
    Meta { degree: usize },
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Oracle { .. } => "oracle",
            Method::Colsa { .. } => "colsa",
            Method::ColsaAic { .. } => "colsa-aic",
            Method::Meta { .. } => "meta",
        }
    }

    pub fn degree(&self) -> Option<usize> {
        match self {
            Method::Oracle { degree } | Method::Colsa { degree } | Method::Meta { degree } => Some(*degree),
            Method::ColsaAic { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSettings {
    pub target_event_rate: f64,
    pub n: usize,
    pub seed: u64,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            target_event_rate: 0.12,
            n: 100_000,
            seed: 20_240_101,
        }
    }
}

/// Simulation config as read from JSON. Missing fields take the defaults of
/// the reference design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub design: SimDesign,
    /// Re-derive the censoring rate and basis upper bound instead of using
    /// `design.censoring_rate` and `upper_bound`.
    pub calibrate: bool,
    pub calibration: CalibrationSettings,
    pub upper_bound: Option<f64>,
    pub quad_order: usize,
    pub methods: Vec<Method>,
    pub solver: SolverConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            design: SimDesign::default(),
            calibrate: true,
            calibration: CalibrationSettings::default(),
            upper_bound: None,
            quad_order: DEFAULT_QUAD_ORDER,
            methods: vec![
                Method::Oracle { degree: 3 },
                Method::Colsa { degree: 2 },
                Method::Colsa { degree: 3 },
                Method::Colsa { degree: 4 },
                Method::ColsaAic {
                    candidates: vec![2, 3, 4],
                },
                Method::Meta { degree: 3 },
            ],
            solver: SolverConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Resolves calibration so every replication shares one censoring rate
    /// and one basis support.
    pub fn prepare(&self, exec: Execution) -> Result<PreparedExperiment> {
        self.design.validate()?;
        if !self.methods.iter().any(|m| matches!(m, Method::Oracle { .. })) {
            return Err(Error::InvalidConfig("the method list needs an oracle reference".into()));
        }
        let mut design = self.design.clone();
        let calibration = if self.calibrate {
            let c = calibrate_censoring(
                &design,
                self.calibration.target_event_rate,
                self.calibration.n,
                self.calibration.seed,
                exec,
            )?;
            design.censoring_rate = c.censoring_rate;
            Some(c)
        } else {
            None
        };
        let upper = match (self.upper_bound, calibration) {
            (Some(b), _) => b,
            (None, Some(c)) => c.upper_bound,
            (None, None) => {
                return Err(Error::InvalidConfig(
                    "upper_bound is required when calibration is disabled".into(),
                ))
            }
        };
        let basis = BasisConfig::new(0, upper).with_quad_order(self.quad_order);
        basis.validate()?;
        Ok(PreparedExperiment {
            design,
            basis,
            calibration,
            methods: self.methods.clone(),
            solver: self.solver,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedExperiment {
    pub design: SimDesign,
    /// Degree is replaced per method.
    pub basis: BasisConfig,
    pub calibration: Option<Calibration>,
    pub methods: Vec<Method>,
    pub solver: SolverConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub n_sites: usize,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let n = s
            .strip_prefix('K')
            .or_else(|| s.strip_prefix('k'))
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::InvalidConfig(format!("layout {s:?} is not of the form K<sites>")))?;
        Ok(Layout { n_sites: n })
    }
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "K{}", self.n_sites)
    }
}

/// Estimates of one method in one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodEstimate {
    pub beta: Vec<f64>,
    pub std_error: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub index: usize,
    pub seed: u64,
    pub event_rate: f64,
    /// One entry per configured method, in order.
    pub results: Vec<std::result::Result<MethodEstimate, String>>,
}

impl Replication {
    pub fn all_converged(&self) -> bool {
        self.results.iter().all(|r| r.is_ok())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub degree: Option<usize>,
    /// 1-based coefficient index.
    pub coefficient: usize,
    pub name: String,
    pub arb_pct: f64,
    pub cp_pct: f64,
    pub mse: f64,
    pub ase: f64,
    pub ese: f64,
    pub mean: f64,
    pub replications: usize,
    pub nonconverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedReplication {
    pub replication: usize,
    pub seed: u64,
    pub method: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub rows: Vec<MetricsRow>,
    pub replications: Vec<Replication>,
    pub failures: Vec<FailedReplication>,
}

impl ExperimentResult {
    pub fn row(&self, method: &str, degree: Option<usize>, coefficient: usize) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.degree == degree && r.coefficient == coefficient)
    }
}

/// SplitMix64 step; gives each replication an independent, replayable seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fit_method(method: &Method, data: &SimDataset, exp: &PreparedExperiment) -> Result<MethodEstimate> {
    let basis_for = |degree| BasisConfig { degree, ..exp.basis };
    let report = match method {
        Method::Oracle { degree } => oracle_fit(&data.pooled(), &basis_for(*degree), &exp.solver)?,
        Method::Colsa { degree } => {
            let payload = run_chain(&data.sites, &basis_for(*degree), &exp.solver)?;
            finalize(&payload, VarianceMode::Variability)?
        }
        Method::ColsaAic { candidates } => {
            let sel = select_degree(&data.sites[0], candidates, &exp.basis, &exp.solver)?;
            let payload = run_chain(&data.sites, &basis_for(sel.chosen), &exp.solver)?;
            finalize(&payload, VarianceMode::Variability)?
        }
        Method::Meta { degree } => {
            let input = MetaInput::fit_sites(&data.sites, &basis_for(*degree), &exp.solver, Execution::Sequential)?;
            meta_combine(&input)?
        }
    };
    Ok(MethodEstimate {
        beta: report.beta(),
        std_error: report.std_errors(),
    })
}

/// Generates one replication's data and fits every method on it.
pub fn run_replication(exp: &PreparedExperiment, sizes: &[usize], index: usize, seed: u64) -> Result<Replication> {
    let data = gen_dataset(&exp.design, sizes, exp.basis.upper, seed, Execution::Sequential)?;
    let results = exp
        .methods
        .iter()
        .map(|m| fit_method(m, &data, exp).map_err(|e| e.to_string()))
        .collect();
    Ok(Replication {
        index,
        seed,
        event_rate: data.event_rate,
        results,
    })
}

pub fn run_experiment(exp: &PreparedExperiment, layout: Layout, reps: usize, seed: u64, exec: Execution) -> Result<ExperimentResult> {
    if reps == 0 {
        return Err(Error::InvalidConfig("need at least one replication".into()));
    }
    let sizes = exp.design.site_pattern.sizes(layout.n_sites);
    let replications = exec
        .map_indices(reps, |i| run_replication(exp, &sizes, i, derive_seed(seed, i as u64)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let mut failures = Vec::new();
    for rep in &replications {
        for (m, res) in exp.methods.iter().zip(&rep.results) {
            if let Err(e) = res {
                log::warn!("replication {} (seed {}) {}: {e}", rep.index, rep.seed, m.label());
                failures.push(FailedReplication {
                    replication: rep.index,
                    seed: rep.seed,
                    method: m.label().to_string(),
                    error: e.clone(),
                });
            }
        }
    }
    let rows = summarize(exp, &replications)?;
    Ok(ExperimentResult {
        rows,
        replications,
        failures,
    })
}

/// Metrics over the replications in which every method converged.
pub fn summarize(exp: &PreparedExperiment, replications: &[Replication]) -> Result<Vec<MetricsRow>> {
    let oracle_idx = exp
        .methods
        .iter()
        .position(|m| matches!(m, Method::Oracle { .. }))
        .ok_or_else(|| Error::InvalidConfig("the method list needs an oracle reference".into()))?;
    let valid: Vec<&Replication> = replications.iter().filter(|r| r.all_converged()).collect();
    if valid.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "every one of {} replications had a failing method",
            replications.len()
        )));
    }
    let truth = &exp.design.beta;
    let names = exp.design.covariate_names();
    let n = valid.len() as f64;
    fn est(r: &Replication, i: usize) -> &MethodEstimate {
        r.results[i].as_ref().expect("filtered to converged")
    }
    let mut rows = Vec::new();
    for (mi, method) in exp.methods.iter().enumerate() {
        let nonconverged = replications.iter().filter(|r| r.results[mi].is_err()).count();
        for (c, &beta0) in truth.iter().enumerate() {
            let mut arb = 0.0;
            let mut cover = 0usize;
            let mut mse = 0.0;
            let mut ase = 0.0;
            let mut values = Vec::with_capacity(valid.len());
            for r in &valid {
                let e = est(r, mi);
                let reference = est(r, oracle_idx).beta[c];
                let b = e.beta[c];
                let se = e.std_error[c];
                arb += ((b - reference) / reference).abs();
                if (b - beta0).abs() <= Z_95 * se {
                    cover += 1;
                }
                mse += (b - beta0).powi(2);
                ase += se;
                values.push(b);
            }
            let mean = values.iter().sum::<f64>() / n;
            let ese = if values.len() > 1 {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            rows.push(MetricsRow {
                method: method.label().to_string(),
                degree: method.degree(),
                coefficient: c + 1,
                name: names[c].clone(),
                arb_pct: 100.0 * arb / n,
                cp_pct: 100.0 * cover as f64 / n,
                mse: mse / n,
                ase: ase / n,
                ese,
                mean,
                replications: valid.len(),
                nonconverged,
            });
        }
    }
    Ok(rows)
}

/// Everything needed to replay an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub tool_version: String,
    pub layout: String,
    pub site_sizes: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    pub replication_seeds: Vec<u64>,
    pub experiment: PreparedExperiment,
    pub failures: Vec<FailedReplication>,
}

impl ExperimentManifest {
    pub fn new(exp: &PreparedExperiment, layout: Layout, reps: usize, seed: u64, result: &ExperimentResult) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            layout: layout.to_string(),
            site_sizes: exp.design.site_pattern.sizes(layout.n_sites),
            replications: reps,
            seed,
            replication_seeds: (0..reps as u64).map(|i| derive_seed(seed, i)).collect(),
            experiment: exp.clone(),
            failures: result.failures.clone(),
        }
    }
}
