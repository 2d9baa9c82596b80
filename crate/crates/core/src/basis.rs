//! Bernstein basis on `[a, b]`, the log baseline hazard it spans, and the
//! Gauss–Legendre rule used for every cumulative-hazard integral.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest supported Bernstein degree. Binomial coefficients stay exact in
/// `f64` well past this.
pub const MAX_DEGREE: usize = 20;

pub const DEFAULT_QUAD_ORDER: usize = 30;

/// Degree, support and quadrature order shared by every site in a chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisConfig {
    pub degree: usize,
    pub lower: f64,
    pub upper: f64,
    pub quad_order: usize,
}

impl BasisConfig {
    /// Support `[0, upper]` with the default quadrature order.
    pub fn new(degree: usize, upper: f64) -> Self {
        Self {
            degree,
            lower: 0.0,
            upper,
            quad_order: DEFAULT_QUAD_ORDER,
        }
    }

    pub fn with_quad_order(mut self, quad_order: usize) -> Self {
        self.quad_order = quad_order;
        self
    }

    pub fn n_basis(&self) -> usize {
        self.degree + 1
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lower.is_finite() && self.upper.is_finite()) {
            return Err(Error::InvalidConfig("basis bounds must be finite".into()));
        }
        // The likelihood integrates the hazard from time zero.
        if self.lower != 0.0 {
            return Err(Error::InvalidConfig(format!(
                "basis lower bound must be 0, got {}",
                self.lower
            )));
        }
        if self.upper <= self.lower {
            return Err(Error::InvalidConfig(format!(
                "basis upper bound {} must exceed lower bound {}",
                self.upper, self.lower
            )));
        }
        if self.degree > MAX_DEGREE {
            return Err(Error::InvalidConfig(format!(
                "degree {} exceeds the maximum of {MAX_DEGREE}",
                self.degree
            )));
        }
        if self.quad_order < 2 {
            return Err(Error::InvalidConfig(format!(
                "quadrature order must be at least 2, got {}",
                self.quad_order
            )));
        }
        Ok(())
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if t.is_nan() || t < self.lower || t > self.upper {
            return Err(Error::Domain {
                time: t,
                lower: self.lower,
                upper: self.upper,
            });
        }
        Ok(())
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    /// Newton iteration on `P_n` from the Chebyshev-like initial guesses.
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "quadrature order must be positive");
        let n = order;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        for i in 0..n.div_ceil(2) {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() <= 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            weights[i] = w;
            nodes[n - 1 - i] = x;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Self { nodes, weights }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Nodes and weights affinely mapped to `[lo, hi]`.
    pub fn mapped(&self, lo: f64, hi: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (mid + half * x, half * w))
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, lo: f64, hi: f64, mut f: F) -> f64 {
        self.mapped(lo, hi).map(|(x, w)| w * f(x)).sum()
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let nf = n as f64;
    let d = nf * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Validated basis with its binomial coefficients and quadrature rule.
#[derive(Debug, Clone)]
pub struct BernsteinBasis {
    config: BasisConfig,
    binomials: Vec<f64>,
    rule: GaussLegendre,
}

/// Integrals of the baseline hazard over `[a, t]`, with first and second
/// derivatives in gamma.
#[derive(Debug, Clone, PartialEq)]
pub struct HazardIntegrals {
    /// `Λ(t) = ∫ exp(g)`
    pub cumulative: f64,
    /// `∫ B_j exp(g)`
    pub gradient: Vec<f64>,
    /// `∫ B_j B_l exp(g)`, row-major, only filled when requested.
    pub hessian: Vec<f64>,
}

impl BernsteinBasis {
    pub fn new(config: BasisConfig) -> Result<Self> {
        config.validate()?;
        let p = config.degree;
        let mut binomials = Vec::with_capacity(p + 1);
        let mut c = 1.0f64;
        for j in 0..=p {
            binomials.push(c);
            c = c * (p - j) as f64 / (j + 1) as f64;
        }
        Ok(Self {
            config,
            binomials,
            rule: GaussLegendre::new(config.quad_order),
        })
    }

    pub fn config(&self) -> &BasisConfig {
        &self.config
    }

    pub fn n_basis(&self) -> usize {
        self.binomials.len()
    }

    pub fn rule(&self) -> &GaussLegendre {
        &self.rule
    }

    /// Basis values at `t` without a domain check. `out.len()` must be `p + 1`.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let p = self.config.degree;
        debug_assert_eq!(out.len(), p + 1);
        let u = ((t - self.config.lower) / (self.config.upper - self.config.lower)).clamp(0.0, 1.0);
        let v = 1.0 - u;
        // out[j] <- u^j, then scale by v^(p-j) walking downward.
        let mut pw = 1.0;
        for o in out.iter_mut() {
            *o = pw;
            pw *= u;
        }
        let mut vw = 1.0;
        for j in (0..=p).rev() {
            out[j] *= vw * self.binomials[j];
            vw *= v;
        }
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        self.config.check_time(t)?;
        let mut out = vec![0.0; self.n_basis()];
        self.eval_into(t, &mut out);
        Ok(out)
    }

    fn check_gamma(&self, gamma: &[f64]) -> Result<()> {
        if gamma.len() != self.n_basis() {
            return Err(Error::DimensionMismatch {
                what: "gamma",
                expected: self.n_basis(),
                found: gamma.len(),
            });
        }
        Ok(())
    }

    pub fn log_hazard(&self, t: f64, gamma: &[f64]) -> Result<f64> {
        self.check_gamma(gamma)?;
        let b = self.eval(t)?;
        Ok(dot(&b, gamma))
    }

    pub fn cumulative_hazard(&self, t: f64, gamma: &[f64]) -> Result<f64> {
        self.check_gamma(gamma)?;
        self.config.check_time(t)?;
        Ok(self.integrals_unchecked(t, gamma, false, false).cumulative)
    }

    pub fn cumulative_hazard_grad(&self, t: f64, gamma: &[f64]) -> Result<Vec<f64>> {
        self.check_gamma(gamma)?;
        self.config.check_time(t)?;
        Ok(self.integrals_unchecked(t, gamma, true, false).gradient)
    }

    /// Checked variant of [`Self::integrals_unchecked`].
    pub fn integrals(&self, t: f64, gamma: &[f64], with_hessian: bool) -> Result<HazardIntegrals> {
        self.check_gamma(gamma)?;
        self.config.check_time(t)?;
        Ok(self.integrals_unchecked(t, gamma, true, with_hessian))
    }

    pub(crate) fn integrals_unchecked(
        &self,
        t: f64,
        gamma: &[f64],
        with_gradient: bool,
        with_hessian: bool,
    ) -> HazardIntegrals {
        let k = self.n_basis();
        let mut out = HazardIntegrals {
            cumulative: 0.0,
            gradient: if with_gradient || with_hessian { vec![0.0; k] } else { Vec::new() },
            hessian: if with_hessian { vec![0.0; k * k] } else { Vec::new() },
        };
        self.accumulate_integrals(t, gamma, &mut out, with_gradient || with_hessian, with_hessian);
        out
    }

    /// Adds the integrals over `[a, t]` into `acc`, which must be sized for
    /// the requested outputs.
    pub(crate) fn accumulate_integrals(
        &self,
        t: f64,
        gamma: &[f64],
        acc: &mut HazardIntegrals,
        with_gradient: bool,
        with_hessian: bool,
    ) {
        let k = self.n_basis();
        let mut b = [0.0f64; MAX_DEGREE + 1];
        let b = &mut b[..k];
        if t <= self.config.lower {
            return;
        }
        for (s, w) in self.rule.mapped(self.config.lower, t) {
            self.eval_into(s, b);
            let e = w * dot(b, gamma).exp();
            acc.cumulative += e;
            if with_gradient {
                for (g, &bj) in acc.gradient.iter_mut().zip(b.iter()) {
                    *g += e * bj;
                }
            }
            if with_hessian {
                for j in 0..k {
                    let ebj = e * b[j];
                    let row = &mut acc.hessian[j * k..(j + 1) * k];
                    for l in j..k {
                        row[l] += ebj * b[l];
                    }
                }
            }
        }
        if with_hessian {
            for j in 0..k {
                for l in 0..j {
                    acc.hessian[j * k + l] = acc.hessian[l * k + j];
                }
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn basis_eval(t: f64, cfg: &BasisConfig) -> Result<Vec<f64>> {
    BernsteinBasis::new(*cfg)?.eval(t)
}

/// `g(t) = Σ γ_j B_j(t)`.
pub fn log_hazard(t: f64, gamma: &[f64], cfg: &BasisConfig) -> Result<f64> {
    BernsteinBasis::new(*cfg)?.log_hazard(t, gamma)
}

/// `Λ(t) = ∫_a^t exp(g(s)) ds` by Gauss–Legendre quadrature.
pub fn cumulative_hazard(t: f64, gamma: &[f64], cfg: &BasisConfig) -> Result<f64> {
    BernsteinBasis::new(*cfg)?.cumulative_hazard(t, gamma)
}

/// `(∫_a^t B_j(s) exp(g(s)) ds)_j`.
pub fn cumulative_hazard_grad(t: f64, gamma: &[f64], cfg: &BasisConfig) -> Result<Vec<f64>> {
    BernsteinBasis::new(*cfg)?.cumulative_hazard_grad(t, gamma)
}

/// Sieve-size diagnostic `Σ |γ_j|`; not enforced as a constraint.
pub fn gamma_l1(gamma: &[f64]) -> f64 {
    gamma.iter().map(|g| g.abs()).sum()
}
