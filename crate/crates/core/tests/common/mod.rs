#![allow(dead_code)]

use colsa::datagen::{gen_dataset, SimDesign};
use colsa::{Execution, SiteData, SubjectRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Upper bound matching the default design's calibrated support.
pub const SIM_UPPER: f64 = 27.0;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Unit-scaled random records on `[0, upper]`.
pub fn random_records(rng: &mut ChaCha8Rng, n: usize, r: usize, upper: f64) -> Vec<SubjectRecord> {
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..r).map(|_| StandardNormal.sample(rng)).collect();
            let t = rng.random_range(0.0..=upper);
            SubjectRecord::new(x, t, rng.random_bool(0.6))
        })
        .collect()
}

pub fn names(r: usize) -> Vec<String> {
    (1..=r).map(|i| format!("x{i}")).collect()
}

/// Sites from the reference design.
pub fn sim_sites(sizes: &[usize], seed: u64) -> Vec<SiteData> {
    gen_dataset(&SimDesign::default(), sizes, SIM_UPPER, seed, Execution::default())
        .unwrap()
        .sites
}

/// Exponential-regression MLE by plain Newton on `(β, log λ)`, written
/// without any of the library's likelihood code.
pub fn exponential_mle(records: &[SubjectRecord]) -> (Vec<f64>, f64) {
    let r = records.first().map_or(0, |rec| rec.x.len());
    let d = r + 1;
    let events: f64 = records.iter().filter(|rec| rec.event).count() as f64;
    let exposure: f64 = records.iter().map(|rec| rec.time).sum();
    let mut theta = vec![0.0; d];
    theta[r] = (events / exposure).ln();
    for _ in 0..100 {
        let mut g = vec![0.0; d];
        let mut h = vec![vec![0.0; d]; d];
        for rec in records {
            let mut z = rec.x.clone();
            z.push(1.0);
            let eta: f64 = z.iter().zip(&theta).map(|(a, b)| a * b).sum();
            let mu = rec.time * eta.exp();
            let resid = if rec.event { 1.0 } else { 0.0 } - mu;
            for i in 0..d {
                g[i] += z[i] * resid;
                for j in 0..d {
                    h[i][j] += mu * z[i] * z[j];
                }
            }
        }
        let step = gauss_solve(h, g.clone());
        for (t, s) in theta.iter_mut().zip(&step) {
            *t += s;
        }
        if g.iter().fold(0.0f64, |a, v| a.max(v.abs())) < 1e-12 {
            break;
        }
    }
    let log_rate = theta.pop().unwrap();
    (theta, log_rate)
}

/// Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        let (head, tail) = a.split_at_mut(col + 1);
        let pivot = &head[col];
        for (off, row) in tail.iter_mut().enumerate() {
            let f = row[col] / pivot[col];
            for (x, p) in row[col..].iter_mut().zip(&pivot[col..]) {
                *x -= f * p;
            }
            b[col + 1 + off] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

/// Relative error with a floor tied to the vector's scale, so near-zero
/// components are judged on the vector's magnitude.
pub fn rel_err(analytic: f64, numeric: f64, scale: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1e-3 * scale).max(1e-12)
}

/// Worst relative errors `(score, information)` of the analytic derivatives
/// against central differences, for one random draw with `n = 50`, `r = 6`.
pub fn finite_difference_errors(g: &mut ChaCha8Rng, p: usize) -> (f64, f64, f64) {
    use colsa::likelihood::{information, loglik, score};
    use colsa::{BasisConfig, ParamVector};
    let h = 1e-6;
    let cfg = BasisConfig::new(p, 2.0);
    let data = random_records(g, 50, 6, 2.0);
    let z = ParamVector::new(
        (0..6).map(|_| g.random_range(-0.3..0.3)).collect(),
        (0..=p).map(|_| g.random_range(-1.0..1.0)).collect(),
    );
    let nudge = |i: usize, step: f64| {
        let mut v = z.to_dvector();
        v[i] += step;
        ParamVector::from_slice(v.as_slice(), 6)
    };
    let s = score(&z, &data, &cfg).unwrap();
    let info = information(&z, &data, &cfg).unwrap();
    let (mut es, mut ei) = (0.0f64, 0.0f64);
    for i in 0..z.dim() {
        let fd = (loglik(&nudge(i, h), &data, &cfg).unwrap() - loglik(&nudge(i, -h), &data, &cfg).unwrap()) / (2.0 * h);
        es = es.max(rel_err(s[i], fd, s.amax()));
        let col = (score(&nudge(i, h), &data, &cfg).unwrap() - score(&nudge(i, -h), &data, &cfg).unwrap()) / (2.0 * h);
        for j in 0..z.dim() {
            ei = ei.max(rel_err(info[(j, i)], -col[j], info.amax()));
        }
    }
    let asym = (&info - info.transpose()).amax() / info.amax();
    (es, ei, asym)
}
