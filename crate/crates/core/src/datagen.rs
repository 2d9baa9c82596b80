//! Synthetic multi-site survival data: correlated mixed-type covariates, a
//! two-component Weibull mixture baseline, event times by inverting the
//! cumulative hazard, and independent exponential censoring.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, OpenClosed01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::likelihood::{SiteData, SubjectRecord};

/// Absolute bisection tolerance on event times.
pub const TIME_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullComponent {
    pub weight: f64,
    pub scale: f64,
    pub shape: f64,
}

impl WeibullComponent {
    fn cum_hazard(&self, t: f64) -> f64 {
        (t / self.scale).powf(self.shape)
    }

    fn hazard(&self, t: f64) -> f64 {
        self.shape / self.scale * (t / self.scale).powf(self.shape - 1.0)
    }
}

/// Site sizes: a fixed leading block followed by equal-size tail sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SitePattern {
    pub leading: Vec<usize>,
    pub tail_size: usize,
}

impl SitePattern {
    pub fn sizes(&self, n_sites: usize) -> Vec<usize> {
        (0..n_sites)
            .map(|k| self.leading.get(k).copied().unwrap_or(self.tail_size))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimDesign {
    pub mixture: Vec<WeibullComponent>,
    pub normal_mean: [f64; 2],
    pub normal_cov: [[f64; 2]; 2],
    pub binary_prob: f64,
    /// Level probabilities of the categorical covariate given the binary one
    /// is 0 (first entry) or 1 (second entry).
    pub categorical_probs: [Vec<f64>; 2],
    pub beta: Vec<f64>,
    /// Rate of the exponential censoring distribution.
    pub censoring_rate: f64,
    pub site_pattern: SitePattern,
}

impl Default for SimDesign {
    fn default() -> Self {
        Self {
            mixture: vec![
                WeibullComponent {
                    weight: 0.5,
                    scale: 10.0,
                    shape: 3.0,
                },
                WeibullComponent {
                    weight: 0.5,
                    scale: 20.0,
                    shape: 5.0,
                },
            ],
            normal_mean: [5.0, 5.0],
            normal_cov: [[10.0, 3.0], [3.0, 2.0]],
            binary_prob: 0.8,
            // (0.1, 0.2, 0.4, 0.5) rescaled to sum to one
            categorical_probs: [vec![0.2, 0.2, 0.3, 0.3], vec![1.0 / 12.0, 2.0 / 12.0, 4.0 / 12.0, 5.0 / 12.0]],
            beta: vec![0.15, -0.15, 0.3, 0.3, 0.3, 0.3],
            censoring_rate: DEFAULT_CENSORING_RATE,
            site_pattern: SitePattern {
                leading: vec![1500, 1500, 1500, 500, 500, 500],
                tail_size: 100,
            },
        }
    }
}

/// Output of [`calibrate_censoring`] for the default design at 12%, n = 100,000.
pub const DEFAULT_CENSORING_RATE: f64 = 0.249_330_600_779_069_8;

impl SimDesign {
    pub fn n_levels(&self) -> usize {
        self.categorical_probs[0].len()
    }

    pub fn n_covariates(&self) -> usize {
        3 + self.n_levels() - 1
    }

    pub fn covariate_names(&self) -> Vec<String> {
        let mut names = vec!["x1".to_string(), "x2".to_string(), "x3".to_string()];
        names.extend((2..=self.n_levels()).map(|l| format!("x4_{l}")));
        names
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.mixture.is_empty() {
            return bad("mixture needs at least one component".into());
        }
        let wsum: f64 = self.mixture.iter().map(|c| c.weight).sum();
        if self.mixture.iter().any(|c| !(0.0..=1.0).contains(&c.weight)) || (wsum - 1.0).abs() > 1e-9 {
            return bad(format!("mixture weights must lie in [0, 1] and sum to 1 (sum {wsum})"));
        }
        if self.mixture.iter().any(|c| !(c.scale > 0.0 && c.shape > 0.0)) {
            return bad("Weibull scales and shapes must be positive".into());
        }
        let [[a, b], [c, d]] = self.normal_cov;
        if b != c || a < 0.0 || d < 0.0 || a * d - b * c < 0.0 {
            return bad("normal covariance must be symmetric positive semidefinite".into());
        }
        if !(0.0..=1.0).contains(&self.binary_prob) {
            return bad(format!("binary probability {} outside [0, 1]", self.binary_prob));
        }
        let levels = self.n_levels();
        for probs in &self.categorical_probs {
            if probs.len() != levels || levels < 1 {
                return bad("categorical blocks must have the same number of levels".into());
            }
            let s: f64 = probs.iter().sum();
            if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (s - 1.0).abs() > 1e-9 {
                return bad(format!("categorical probabilities {probs:?} must lie in [0, 1] and sum to 1"));
            }
        }
        if self.beta.len() != self.n_covariates() {
            return bad(format!(
                "beta has {} entries, expected {}",
                self.beta.len(),
                self.n_covariates()
            ));
        }
        if !(self.censoring_rate >= 0.0 && self.censoring_rate.is_finite()) {
            return bad(format!("censoring rate {} must be finite and nonnegative", self.censoring_rate));
        }
        Ok(())
    }

    /// Baseline `(S₀(t), λ₀(t), Λ₀(t))`.
    pub fn baseline(&self, t: f64) -> Result<(f64, f64, f64)> {
        if t.is_nan() || t < 0.0 {
            return Err(Error::InvalidConfig(format!("baseline evaluated at negative time {t}")));
        }
        let log_s = self.log_baseline_survival(t);
        let hazard: f64 = self
            .mixture
            .iter()
            .filter(|c| c.weight > 0.0)
            .map(|c| (c.weight.ln() - c.cum_hazard(t) - log_s).exp() * c.hazard(t))
            .sum();
        Ok((log_s.exp(), hazard, -log_s))
    }

    fn log_baseline_survival(&self, t: f64) -> f64 {
        let terms: Vec<f64> = self
            .mixture
            .iter()
            .filter(|c| c.weight > 0.0)
            .map(|c| c.weight.ln() - c.cum_hazard(t))
            .collect();
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return max;
        }
        max + terms.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
    }

    pub fn baseline_cum_hazard(&self, t: f64) -> f64 {
        -self.log_baseline_survival(t)
    }

    fn normal_factor(&self) -> [[f64; 2]; 2] {
        let [[a, b], [_, d]] = self.normal_cov;
        let l11 = a.sqrt();
        let l21 = if l11 > 0.0 { b / l11 } else { 0.0 };
        let l22 = (d - l21 * l21).max(0.0).sqrt();
        [[l11, 0.0], [l21, l22]]
    }
}

/// One row of covariates with the categorical covariate dummy-coded
/// against level 1.
pub fn gen_covariate_row<R: Rng + ?Sized>(design: &SimDesign, rng: &mut R) -> Vec<f64> {
    let l = design.normal_factor();
    let z1: f64 = StandardNormal.sample(rng);
    let z2: f64 = StandardNormal.sample(rng);
    let x1 = design.normal_mean[0] + l[0][0] * z1;
    let x2 = design.normal_mean[1] + l[1][0] * z1 + l[1][1] * z2;
    let x3 = rng.random_bool(design.binary_prob);
    let probs = &design.categorical_probs[usize::from(x3)];
    let u: f64 = rng.random();
    let mut level = probs.len() - 1;
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            level = i;
            break;
        }
    }
    let mut row = vec![x1, x2, f64::from(u8::from(x3))];
    row.extend((1..probs.len()).map(|lvl| if lvl == level { 1.0 } else { 0.0 }));
    row
}

pub fn gen_covariates<R: Rng + ?Sized>(n: usize, design: &SimDesign, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    design.validate()?;
    if n == 0 {
        return Err(Error::InvalidConfig("need at least one row".into()));
    }
    Ok((0..n).map(|_| gen_covariate_row(design, rng)).collect())
}

/// Solves `Λ₀(T) exp(x·β) = target` by bisection.
pub fn invert_cum_hazard(design: &SimDesign, risk: f64, target: f64) -> f64 {
    if target <= 0.0 {
        return 0.0;
    }
    let f = |t: f64| design.baseline_cum_hazard(t) * risk - target;
    let mut lo = 0.0;
    let mut hi = 1.0;
    while f(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    while hi - lo > TIME_TOL {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Event time for covariates `x` under true coefficients `beta`, by
/// cumulative-hazard inversion of `u ~ U(0, 1]`.
pub fn gen_event_time<R: Rng + ?Sized>(x: &[f64], beta: &[f64], design: &SimDesign, rng: &mut R) -> f64 {
    let u: f64 = OpenClosed01.sample(rng);
    event_time_from_uniform(x, beta, design, u)
}

pub fn event_time_from_uniform(x: &[f64], beta: &[f64], design: &SimDesign, u: f64) -> f64 {
    let risk: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>().exp();
    invert_cum_hazard(design, risk, -u.ln())
}

/// Raw draws for one subject before censoring is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectDraw {
    pub x: Vec<f64>,
    pub event_time: f64,
    /// Unit-rate exponential; the censoring time is this divided by the rate.
    pub censor_unit: f64,
}

/// Deterministic per-subject stream: the draw depends only on
/// `(seed, index)`.
pub fn draw_subject(design: &SimDesign, seed: u64, index: u64) -> SubjectDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let x = gen_covariate_row(design, &mut rng);
    let event_time = gen_event_time(&x, &design.beta, design, &mut rng);
    let censor_unit: f64 = Exp1.sample(&mut rng);
    SubjectDraw {
        x,
        event_time,
        censor_unit,
    }
}

impl SubjectDraw {
    pub fn censor_time(&self, rate: f64) -> f64 {
        if rate > 0.0 {
            self.censor_unit / rate
        } else {
            f64::INFINITY
        }
    }

    /// Observed record under censoring `rate`, administratively censored at `upper`.
    pub fn observe(&self, rate: f64, upper: f64) -> SubjectRecord {
        let c = self.censor_time(rate);
        let y = self.event_time.min(c);
        if y > upper {
            SubjectRecord::new(self.x.clone(), upper, false)
        } else {
            SubjectRecord::new(self.x.clone(), y, self.event_time <= c)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDataset {
    pub sites: Vec<SiteData>,
    pub true_beta: Vec<f64>,
    pub event_rate: f64,
}

impl SimDataset {
    pub fn pooled(&self) -> SiteData {
        SiteData::pooled(&self.sites).expect("sites share one column contract")
    }
}

/// Generates one dataset split into sites of the given sizes.
pub fn gen_dataset(design: &SimDesign, sizes: &[usize], upper: f64, seed: u64, exec: Execution) -> Result<SimDataset> {
    design.validate()?;
    if sizes.is_empty() {
        return Err(Error::InvalidConfig("no site sizes given".into()));
    }
    let total: usize = sizes.iter().sum();
    let records = exec.map_indices(total, |i| draw_subject(design, seed, i as u64).observe(design.censoring_rate, upper));
    let events = records.iter().filter(|r| r.event).count();
    let names = design.covariate_names();
    let mut sites = Vec::with_capacity(sizes.len());
    let mut iter = records.into_iter();
    for &n in sizes {
        sites.push(SiteData::new(names.clone(), iter.by_ref().take(n).collect()));
    }
    Ok(SimDataset {
        sites,
        true_beta: design.beta.clone(),
        event_rate: events as f64 / total.max(1) as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub censoring_rate: f64,
    pub upper_bound: f64,
    /// Event rate achieved on the calibration draw.
    pub event_rate: f64,
}

/// Bisects the censoring rate (on a log scale) so the calibration draw hits
/// `target` event rate, then sets the basis upper bound to 1.05 times the
/// largest observed time.
pub fn calibrate_censoring(design: &SimDesign, target: f64, n: usize, seed: u64, exec: Execution) -> Result<Calibration> {
    design.validate()?;
    if !(target > 0.0 && target < 1.0) || n == 0 {
        return Err(Error::InvalidConfig(format!("cannot calibrate to event rate {target} with n = {n}")));
    }
    let draws = exec.map_indices(n, |i| draw_subject(design, seed, i as u64));
    let rate_at = |rate: f64| draws.iter().filter(|d| d.event_time <= d.censor_time(rate)).count() as f64 / n as f64;
    let (mut lo, mut hi) = (1e-8f64.ln(), 1e4f64.ln());
    if rate_at(lo.exp()) < target || rate_at(hi.exp()) > target {
        return Err(Error::InvalidConfig(format!("event rate {target} is not reachable by censoring")));
    }
    // event rate decreases with the censoring rate
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate_at(mid.exp()) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let rate = (0.5 * (lo + hi)).exp();
    let max_y = draws
        .iter()
        .map(|d| d.event_time.min(d.censor_time(rate)))
        .fold(0.0f64, f64::max);
    Ok(Calibration {
        censoring_rate: rate,
        upper_bound: 1.05 * max_y,
        event_rate: rate_at(rate),
    })
}
