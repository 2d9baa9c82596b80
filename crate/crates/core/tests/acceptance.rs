//! Acceptance suite. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line each and exits non-zero if any fails.
//!
//! `cargo test -p colsa --test acceptance --release`

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use colsa::datagen::{calibrate_censoring, draw_subject, gen_covariates, gen_dataset, invert_cum_hazard, SimDesign};
use colsa::harness::{run_experiment, ExperimentConfig, ExperimentResult, Layout, Method};
use colsa::{
    fit_local, renew, renew_with_contract, run_chain, survival_curve, BasisConfig, Error, Execution, SiteData,
    SolverConfig, SummaryPayload,
};
use common::*;
use rand::Rng;

const MASTER_SEED: u64 = 1;
const REPS: usize = 200;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn experiment(methods: Vec<Method>, sites: usize) -> ExperimentResult {
    let cfg = ExperimentConfig {
        methods,
        ..ExperimentConfig::default()
    };
    let exp = cfg.prepare(Execution::default()).expect("calibration");
    run_experiment(&exp, Layout { n_sites: sites }, REPS, MASTER_SEED, Execution::default()).expect("experiment")
}

fn metric<'a>(res: &'a ExperimentResult, method: &str, degree: usize, coef: usize) -> &'a colsa::harness::MetricsRow {
    res.row(method, Some(degree), coef)
        .unwrap_or_else(|| panic!("missing row {method} p={degree} coefficient {coef}"))
}

fn gradient_hessian() -> Outcome {
    let mut g = rng(1);
    let (mut es, mut ei, mut asym) = (0.0f64, 0.0f64, 0.0f64);
    for draw in 0..20 {
        let (s, i, a) = finite_difference_errors(&mut g, [0, 2, 3, 4][draw % 4]);
        es = es.max(s);
        ei = ei.max(i);
        asym = asym.max(a);
    }
    check(
        es <= 1e-6 && ei <= 1e-5,
        format!("max score rel err {es:.2e} (<= 1e-6), max information rel err {ei:.2e} (<= 1e-5), asymmetry {asym:.1e}"),
    )
}

fn exponential_reduction() -> Outcome {
    let mut g = rng(2);
    let site = SiteData::new(vec![], random_records(&mut g, 500, 0, 5.0));
    let p = fit_local(&site, &BasisConfig::new(0, 5.0), &SolverConfig::default()).unwrap();
    let closed = site.events() as f64 / site.total_time();
    let e0 = (p.zeta.gamma[0].exp() - closed).abs() / closed;

    let sites = sim_sites(&[1500], 3);
    let p = fit_local(&sites[0], &BasisConfig::new(0, SIM_UPPER), &SolverConfig::default()).unwrap();
    let (beta, log_rate) = exponential_mle(&sites[0].records);
    let e1 = p
        .zeta
        .beta
        .iter()
        .zip(&beta)
        .map(|(a, b)| (a - b).abs())
        .fold((p.zeta.gamma[0] - log_rate).abs(), f64::max);
    check(
        e0 <= 1e-8 && e1 <= 1e-6,
        format!("no-covariate rate rel err {e0:.2e} (<= 1e-8), independent solver max diff {e1:.2e} (<= 1e-6)"),
    )
}

fn oracle_proximity(k6: &ExperimentResult) -> Outcome {
    let b1 = metric(k6, "colsa", 3, 1).arb_pct;
    let b6 = metric(k6, "colsa", 3, 6).arb_pct;
    check(b1 <= 3.0 && b6 <= 12.0, format!("K=6 p=3 ARB(b1) = {b1:.2}% (<= 3), ARB(b6) = {b6:.2}% (<= 12)"))
}

fn coverage(k6: &ExperimentResult) -> Outcome {
    let c1 = metric(k6, "colsa", 3, 1).cp_pct;
    let c6 = metric(k6, "colsa", 3, 6).cp_pct;
    let ok = |c: f64| (92.0..=98.0).contains(&c);
    check(ok(c1) && ok(c6), format!("K=6 p=3 CP(b1) = {c1:.1}%, CP(b6) = {c6:.1}% (both in [92, 98])"))
}

fn efficiency(k6: &ExperimentResult) -> Outcome {
    let c = metric(k6, "colsa", 3, 1).ase;
    let o = metric(k6, "oracle", 3, 1).ase;
    let rel = (c - o).abs() / o;
    check(rel <= 0.05, format!("ASE(b1) colsa {c:.5} vs oracle {o:.5}: rel diff {:.2}% (<= 5)", 100.0 * rel))
}

fn meta_degradation(k20: &ExperimentResult) -> Outcome {
    let m = metric(k20, "meta", 3, 6).arb_pct;
    let c = metric(k20, "colsa", 3, 6).arb_pct;
    check(m >= 3.0 * c, format!("K=20 ARB(b6) meta {m:.2}% vs colsa {c:.2}% (ratio {:.1}, >= 3)", m / c))
}

fn degree_insensitivity(k6: &ExperimentResult) -> Outcome {
    let means: Vec<f64> = [2, 3, 4].iter().map(|&p| metric(k6, "colsa", p, 1).mean).collect();
    let spread = means.iter().cloned().fold(f64::MIN, f64::max) - means.iter().cloned().fold(f64::MAX, f64::min);
    check(
        spread <= 0.005,
        format!("mean b1 for p=2,3,4 = {:.4}, {:.4}, {:.4}: spread {spread:.4} (<= 0.005)", means[0], means[1], means[2]),
    )
}

fn protocol_properties() -> Outcome {
    let solver = SolverConfig::default();
    let basis = BasisConfig::new(3, SIM_UPPER);
    let sites = sim_sites(&[800, 400], 8);
    let p = fit_local(&sites[0], &basis, &solver).unwrap();

    let empty = SiteData::new(p.covariate_names.clone(), vec![]);
    let q = renew(&p, &empty, &solver).unwrap();
    let fix = q
        .zeta
        .to_dvector()
        .iter()
        .zip(p.zeta.to_dvector().iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let mut round_trip = true;
    let mut g = rng(8);
    for _ in 0..50 {
        let r = g.random_range(1..5);
        let deg = g.random_range(0..6);
        let site = SiteData::new(names(r), random_records(&mut g, 40, r, 3.0));
        if let Ok(pl) = fit_local(&site, &BasisConfig::new(deg, 3.0), &solver) {
            round_trip &= SummaryPayload::from_json(&pl.to_json().unwrap()).unwrap() == pl;
        }
    }
    let chained = renew(&p, &sites[1], &solver).unwrap();
    round_trip &= SummaryPayload::from_json(&chained.to_json().unwrap()).unwrap() == chained;

    let rejects = [BasisConfig::new(3, 30.0), BasisConfig::new(4, SIM_UPPER), basis.with_quad_order(20)]
        .iter()
        .all(|c| matches!(renew_with_contract(&p, &sites[1], c, &solver), Err(Error::Protocol(_))));

    let chain1 = run_chain(&sites[..1], &basis, &solver).unwrap() == p;
    check(
        fix <= solver.tolerance && round_trip && rejects && chain1,
        format!("empty-site drift {fix:.1e}, JSON identity {round_trip}, basis mismatch rejected {rejects}, chain-of-1 == local {chain1}"),
    )
}

fn survival_properties() -> Outcome {
    let sites = sim_sites(&[1500], 9);
    let mut p = fit_local(&sites[0], &BasisConfig::new(3, SIM_UPPER), &SolverConfig::default()).unwrap();
    let grid: Vec<f64> = (0..1000).map(|i| SIM_UPPER * i as f64 / 999.0).collect();
    let x = [4.0, 6.0, 1.0, 0.0, 0.0, 1.0];
    let curve = survival_curve(&p, &x, &grid).unwrap();
    let base = survival_curve(&p, &[0.0; 6], &grid).unwrap();
    let starts_at_one = curve[0].1 == 1.0;
    let monotone = curve.windows(2).all(|w| w[1].1 <= w[0].1);
    let risk: f64 = x.iter().zip(&p.zeta.beta).map(|(a, b)| a * b).sum::<f64>().exp();
    let ph = curve
        .iter()
        .zip(&base)
        .map(|(c, b)| (c.1 - b.1.powf(risk)).abs())
        .fold(0.0, f64::max);

    p.zeta.beta.iter_mut().for_each(|b| *b = 0.0);
    p.zeta.gamma.iter_mut().for_each(|g| *g = 0.0);
    let flat = survival_curve(&p, &x, &grid)
        .unwrap()
        .iter()
        .map(|&(t, s)| (s - (-t).exp()).abs())
        .fold(0.0, f64::max);
    check(
        starts_at_one && monotone && ph <= 1e-12 && flat <= 1e-8,
        format!("S(0)=1 {starts_at_one}, nonincreasing on 1000 points {monotone}, PH identity err {ph:.1e} (<= 1e-12), unit-hazard err {flat:.1e} (<= 1e-8)"),
    )
}

fn generator_fidelity() -> Outcome {
    let d = SimDesign::default();
    let mut g = rng(10);
    let mut resid = 0.0f64;
    for i in 0..100_000u64 {
        let draw = draw_subject(&d, 10, i);
        let risk: f64 = draw.x.iter().zip(&d.beta).map(|(a, b)| a * b).sum::<f64>().exp();
        let target = -g.random_range(f64::MIN_POSITIVE..1.0f64).ln();
        let t = invert_cum_hazard(&d, risk, target);
        resid = resid.max((d.baseline_cum_hazard(t) * risk - target).abs() / target.max(1.0));
    }

    let cal = colsa::harness::CalibrationSettings::default();
    let c = calibrate_censoring(&d, cal.target_event_rate, cal.n, cal.seed, Execution::default()).unwrap();
    let mut design = d.clone();
    design.censoring_rate = c.censoring_rate;
    let rate = gen_dataset(&design, &[50_000], c.upper_bound, 11, Execution::default())
        .unwrap()
        .event_rate;

    // marginal moments against their Monte-Carlo standard errors
    let n = 100_000;
    let xs = gen_covariates(n, &d, &mut g).unwrap();
    let nf = n as f64;
    let mean = |j: usize| xs.iter().map(|x| x[j]).sum::<f64>() / nf;
    let q = d.binary_prob;
    let mut z = vec![
        (mean(0) - d.normal_mean[0]) / (d.normal_cov[0][0] / nf).sqrt(),
        (mean(1) - d.normal_mean[1]) / (d.normal_cov[1][1] / nf).sqrt(),
        (mean(2) - q) / (q * (1.0 - q) / nf).sqrt(),
    ];
    for lvl in 1..d.n_levels() {
        let p = (1.0 - q) * d.categorical_probs[0][lvl] + q * d.categorical_probs[1][lvl];
        z.push((mean(2 + lvl) - p) / (p * (1.0 - p) / nf).sqrt());
    }
    let (m0, m1) = (mean(0), mean(1));
    let cov = xs.iter().map(|x| (x[0] - m0) * (x[1] - m1)).sum::<f64>() / nf;
    let v0 = xs.iter().map(|x| (x[0] - m0).powi(2)).sum::<f64>() / nf;
    let v1 = xs.iter().map(|x| (x[1] - m1).powi(2)).sum::<f64>() / nf;
    let rho = d.normal_cov[0][1] / (d.normal_cov[0][0] * d.normal_cov[1][1]).sqrt();
    z.push((cov / (v0 * v1).sqrt() - rho) / ((1.0 - rho * rho) / nf.sqrt()));
    let worst = z.iter().map(|v| v.abs()).fold(0.0, f64::max);

    check(
        resid <= 1e-8 && (rate - 0.12).abs() <= 0.02 && worst <= 3.0,
        format!(
            "max inversion residual {resid:.1e} (<= 1e-8), event rate {:.2}% (12 +/- 2), worst moment |z| {worst:.2} (<= 3)",
            100.0 * rate
        ),
    )
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome, budget: Duration, failures: &mut usize) {
    let start = Instant::now();
    let out = f();
    let took = start.elapsed();
    let status = if out.pass { "PASS" } else { "FAIL" };
    if !out.pass {
        *failures += 1;
    }
    let over = if took > budget { " [over runtime target]" } else { "" };
    println!("[{status}] criterion {id}: {name}: {} ({:.1}s){over}", out.detail, took.as_secs_f64());
}

fn main() -> ExitCode {
    let mut failures = 0;
    run(1, "gradient/hessian", gradient_hessian, Duration::from_secs(10), &mut failures);
    run(2, "exponential reduction", exponential_reduction, Duration::from_secs(5), &mut failures);

    let start = Instant::now();
    let k6 = experiment(
        vec![
            Method::Oracle { degree: 3 },
            Method::Colsa { degree: 2 },
            Method::Colsa { degree: 3 },
            Method::Colsa { degree: 4 },
        ],
        6,
    );
    println!("K=6, {REPS} replications in {:.1}s (target < 900s)", start.elapsed().as_secs_f64());
    let dropped = k6.failures.len();
    if dropped > 0 {
        println!("  {dropped} method failures excluded from metrics");
    }
    run(3, "renewable vs oracle ARB", || oracle_proximity(&k6), Duration::from_secs(900), &mut failures);
    run(4, "coverage", || coverage(&k6), Duration::from_secs(900), &mut failures);
    run(5, "efficiency parity", || efficiency(&k6), Duration::from_secs(900), &mut failures);

    let start = Instant::now();
    let k20 = experiment(
        vec![
            Method::Oracle { degree: 3 },
            Method::Colsa { degree: 3 },
            Method::Meta { degree: 3 },
        ],
        20,
    );
    println!("K=20, {REPS} replications in {:.1}s (target < 1800s)", start.elapsed().as_secs_f64());
    run(6, "meta degradation", || meta_degradation(&k20), Duration::from_secs(1800), &mut failures);
    run(7, "degree insensitivity", || degree_insensitivity(&k6), Duration::from_secs(900), &mut failures);
    run(8, "protocol properties", protocol_properties, Duration::from_secs(60), &mut failures);
    run(9, "survival properties", survival_properties, Duration::from_secs(60), &mut failures);
    run(10, "generator fidelity", generator_fidelity, Duration::from_secs(60), &mut failures);

    let o1 = metric(&k6, "oracle", 3, 1);
    let ase = metric(&k6, "colsa", 3, 1).ase;
    let extra = (ase / 0.0161 - 1.0).abs() <= 0.15;
    if !extra {
        failures += 1;
    }
    println!(
        "[{}] extra: ASE(b1) colsa p=3 {ase:.5} within 15% of 0.0161; oracle CP(b1) {:.1}%",
        if extra { "PASS" } else { "FAIL" },
        o1.cp_pct
    );
    println!("acceptance: {failures} failing check(s) across 10 criteria and 1 extra");
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
