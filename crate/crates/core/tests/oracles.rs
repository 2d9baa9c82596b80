//! Analytic derivatives and fits checked against independent routes:
//! finite differences, closed forms and a separately coded exponential
//! regression.

mod common;

use approx::assert_relative_eq;
use colsa::likelihood::{information, loglik, score, variability};
use colsa::{fit_local, newton_solve, BasisConfig, ParamVector, SiteData, SiteLikelihood, SolverConfig, SubjectRecord};
use common::*;
use nalgebra::SymmetricEigen;
use rand::Rng;

fn random_params(rng: &mut rand_chacha::ChaCha8Rng, r: usize, p: usize) -> ParamVector {
    ParamVector::new(
        (0..r).map(|_| rng.random_range(-0.3..0.3)).collect(),
        (0..=p).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
}

#[test]
fn score_and_information_match_finite_differences() {
    let mut g = rng(100);
    for draw in 0..20 {
        let p = [0, 2, 3, 4][draw % 4];
        let (es, ei, asym) = finite_difference_errors(&mut g, p);
        assert!(es <= 1e-6, "draw {draw}: score rel err {es:e}");
        assert!(ei <= 1e-5, "draw {draw}: information rel err {ei:e}");
        assert!(asym <= 1e-12);
    }
}

#[test]
fn information_and_variability_are_psd() {
    let mut g = rng(101);
    for _ in 0..20 {
        let p = g.random_range(0..=5);
        let cfg = BasisConfig::new(p, 2.0);
        let data = random_records(&mut g, 40, 3, 2.0);
        let z = random_params(&mut g, 3, p);
        for m in [information(&z, &data, &cfg).unwrap(), variability(&z, &data, &cfg).unwrap()] {
            let eig = SymmetricEigen::new(m.clone());
            let min = eig.eigenvalues.min();
            assert!(min >= -1e-12 * m.amax().max(1.0), "min eigenvalue {min:e}");
        }
    }
}

#[test]
fn degree_zero_matches_exponential_regression_formulas() {
    let mut g = rng(102);
    for _ in 0..20 {
        let data = random_records(&mut g, 60, 3, 4.0);
        let z = random_params(&mut g, 3, 0);
        let cfg = BasisConfig::new(0, 4.0);
        let lam = z.gamma[0].exp();
        let (mut ll, mut s, mut h00) = (0.0, vec![0.0; 4], 0.0);
        for rec in &data {
            let eta: f64 = rec.x.iter().zip(&z.beta).map(|(a, b)| a * b).sum();
            let d = if rec.event { 1.0 } else { 0.0 };
            let mu = lam * rec.time * eta.exp();
            ll += d * (eta + z.gamma[0]) - mu;
            for (sk, xk) in s.iter_mut().zip(&rec.x) {
                *sk += xk * (d - mu);
            }
            s[3] += d - mu;
            h00 += mu * rec.x[0] * rec.x[0];
        }
        assert_relative_eq!(loglik(&z, &data, &cfg).unwrap(), ll, max_relative = 1e-10);
        let got = score(&z, &data, &cfg).unwrap();
        for k in 0..4 {
            assert!((got[k] - s[k]).abs() <= 1e-10 * (1.0 + s[k].abs()));
        }
        assert_relative_eq!(information(&z, &data, &cfg).unwrap()[(0, 0)], h00, max_relative = 1e-10);
    }
}

#[test]
fn exponential_closed_form_without_covariates() {
    let mut g = rng(103);
    let records: Vec<SubjectRecord> = random_records(&mut g, 500, 0, 5.0);
    let site = SiteData::new(vec![], records);
    let payload = fit_local(&site, &BasisConfig::new(0, 5.0), &SolverConfig::default()).unwrap();
    let expect = site.events() as f64 / site.total_time();
    assert_relative_eq!(payload.zeta.gamma[0].exp(), expect, max_relative = 1e-8);
}

#[test]
fn exponential_fit_with_covariates_matches_independent_solver() {
    let sites = sim_sites(&[1500], 104);
    let site = &sites[0];
    let payload = fit_local(site, &BasisConfig::new(0, SIM_UPPER), &SolverConfig::default()).unwrap();
    let (beta, log_rate) = exponential_mle(&site.records);
    for (a, b) in payload.zeta.beta.iter().zip(&beta) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
    assert!((payload.zeta.gamma[0] - log_rate).abs() <= 1e-6);
}

#[test]
fn converged_local_fit_has_small_score() {
    let sites = sim_sites(&[1500], 105);
    let cfg = BasisConfig::new(3, SIM_UPPER);
    let payload = fit_local(&sites[0], &cfg, &SolverConfig::default()).unwrap();
    let s = score(&payload.zeta, &sites[0].records, &cfg).unwrap();
    assert!(s.amax() <= 1e-8, "score norm {:e}", s.amax());
    assert!(payload.sites[0].converged);
}

#[test]
fn solver_objective_trace_is_monotone_on_real_fits() {
    let sites = sim_sites(&[500], 106);
    let cfg = BasisConfig::new(4, SIM_UPPER);
    let lik = SiteLikelihood::from_site(&sites[0], &cfg).unwrap();
    struct Eq<'a>(SiteLikelihood<'a>);
    impl colsa::solver::EstimatingEquation for Eq<'_> {
        fn merit(&self, z: &nalgebra::DVector<f64>) -> f64 {
            self.0.loglik(z.as_slice()).unwrap()
        }
        fn linearize(&self, z: &nalgebra::DVector<f64>) -> colsa::solver::Linearization {
            let ev = self.0.evaluate(z.as_slice(), colsa::likelihood::Need::NEWTON).unwrap();
            colsa::solver::Linearization {
                merit: ev.loglik,
                value: ev.score.unwrap(),
                neg_jacobian: ev.information.unwrap(),
            }
        }
    }
    // start far from the optimum so step halving is exercised
    let mut init = vec![1.0; 6];
    init.extend(vec![3.0; 5]);
    let eq = Eq(lik);
    let a = newton_solve(&eq, nalgebra::DVector::from_vec(init.clone()), &SolverConfig::default()).unwrap();
    let b = newton_solve(&eq, nalgebra::DVector::from_vec(init), &SolverConfig::default()).unwrap();
    for w in a.objective_trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-12 * (1.0 + w[0].abs()));
    }
    assert_eq!(a, b);
}

fn brute_log_hazard(t: f64, gamma: &[f64], b: f64) -> f64 {
    let p = gamma.len() - 1;
    let u = t / b;
    let mut g = 0.0;
    for (j, c) in gamma.iter().enumerate() {
        let binom: f64 = (1..=j).map(|i| (p + 1 - i) as f64 / i as f64).product();
        g += c * binom * u.powi(j as i32) * (1.0 - u).powi((p - j) as i32);
    }
    g
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn loglik_matches_naive_evaluator() {
    let mut g = rng(107);
    let b = 3.0;
    for p in [1, 3, 5] {
        let data = random_records(&mut g, 50, 2, b);
        let z = random_params(&mut g, 2, p);
        let mut naive = 0.0;
        for rec in &data {
            let eta: f64 = rec.x.iter().zip(&z.beta).map(|(a, c)| a * c).sum();
            let cum = simpson(&|t| brute_log_hazard(t, &z.gamma, b).exp(), 0.0, rec.time, 2000);
            if rec.event {
                naive += eta + brute_log_hazard(rec.time, &z.gamma, b);
            }
            naive -= cum * eta.exp();
        }
        let got = loglik(&z, &data, &BasisConfig::new(p, b)).unwrap();
        assert!((got - naive).abs() <= 1e-9 * naive.abs().max(1.0), "p={p}: {got} vs {naive}");
    }
}
