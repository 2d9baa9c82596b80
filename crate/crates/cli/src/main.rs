//! `colsa` command-line interface: one subcommand per protocol step, plus
//! the pooled/meta comparators and the simulation driver.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use colsa::basis::DEFAULT_QUAD_ORDER;
use colsa::datagen::gen_dataset;
use colsa::harness::{run_experiment, ExperimentConfig, ExperimentManifest, Layout};
use colsa::io::{load_site, write_aic_csv, write_curve_csv, write_metrics_csv, write_report_csv, write_site_csv};
use colsa::{
    finalize, fit_local, meta_combine, oracle_fit_sites, renew, renew_with_contract, select_degree, survival_curve,
    BasisConfig, Error, Execution, MetaInput, SiteData, SolverConfig, SummaryPayload, VarianceMode,
};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "colsa", version, about = "Site-by-site Cox regression from summary statistics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Newton iteration cap for fitting commands.
    #[arg(long = "max-iter", global = true)]
    max_iter: Option<usize>,
    /// Convergence threshold on the sup-norm of the estimating equation.
    #[arg(long, global = true)]
    tolerance: Option<f64>,
}

#[derive(Args, Clone)]
struct BasisArgs {
    /// Bernstein degree of the log baseline hazard.
    #[arg(long)]
    degree: usize,
    /// Upper end of the time support, agreed by all sites in advance.
    #[arg(long = "upper-bound")]
    upper_bound: f64,
    /// Gauss–Legendre nodes per subject integral.
    #[arg(long = "quad", default_value_t = DEFAULT_QUAD_ORDER)]
    quad: usize,
}

impl BasisArgs {
    fn config(&self) -> BasisConfig {
        BasisConfig::new(self.degree, self.upper_bound).with_quad_order(self.quad)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fit site 1 and write the initial summary payload.
    FitLocal {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        basis: BasisArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Update an incoming payload with this site's data.
    Renew {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        payload: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Expected degree; the payload is rejected if it differs.
        #[arg(long, requires = "upper_bound")]
        degree: Option<usize>,
        /// Expected upper bound; the payload is rejected if it differs.
        #[arg(long = "upper-bound", requires = "degree")]
        upper_bound: Option<f64>,
        #[arg(long = "quad", requires = "degree")]
        quad: Option<usize>,
    },
    /// Turn a payload into coefficient estimates with standard errors.
    Finalize {
        #[arg(long)]
        payload: PathBuf,
        #[arg(long, default_value = "variability")]
        variance: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predicted survival curve for one covariate vector.
    Survival {
        #[arg(long)]
        payload: PathBuf,
        /// JSON array of values, or an object keyed by covariate name.
        #[arg(long)]
        covariates: PathBuf,
        /// `t0:t1:points`, evenly spaced and inclusive of both ends.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// AIC over candidate degrees on one site's data.
    SelectDegree {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        candidates: Vec<usize>,
        #[arg(long = "upper-bound")]
        upper_bound: f64,
        #[arg(long = "quad", default_value_t = DEFAULT_QUAD_ORDER)]
        quad: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pooled fit on all sites' data.
    Oracle {
        #[arg(long, num_args = 1.., required = true)]
        data: Vec<PathBuf>,
        #[command(flatten)]
        basis: BasisArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inverse-variance weighted meta-analysis of per-site fits.
    Meta {
        #[arg(long, num_args = 1.., required = true)]
        data: Vec<PathBuf>,
        #[command(flatten)]
        basis: BasisArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one simulated dataset as per-site CSV files.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "K6")]
        layout: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
    },
    /// Replicated simulation study; writes one metrics row per method and coefficient.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "K6")]
        layout: String,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>.manifest.json`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

struct Failure {
    stage: &'static str,
    error: Error,
}

impl Failure {
    fn exit_code(&self) -> u8 {
        if self.error.is_non_convergence() {
            3
        } else {
            2
        }
    }
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, Failure>;
}

impl<T, E: Into<Error>> Stage<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            stage,
            error: e.into(),
        })
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let mut solver = SolverConfig::default();
    if let Some(n) = cli.max_iter {
        solver.max_iter = n;
    }
    if let Some(t) = cli.tolerance {
        solver.tolerance = t;
    }
    match run(cli.command, solver) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}: {}", f.stage, f.error);
            ExitCode::from(f.exit_code())
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| {
        Error::InvalidConfig(format!("cannot create {}: {e}", path.display()))
    })?))
}

fn read_text(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))
}

fn read_payload(path: &Path) -> Result<SummaryPayload, Error> {
    SummaryPayload::from_json(&read_text(path)?)
}

fn write_payload(payload: &SummaryPayload, path: &Path) -> Result<(), Error> {
    let mut w = create(path)?;
    w.write_all(payload.to_json()?.as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Runs `f` against the output file, or stdout when no path is given.
fn with_output(path: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> Result<(), Error>) -> Result<(), Error> {
    match path {
        Some(p) => {
            let mut w = create(p)?;
            f(&mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock)?;
        }
    }
    Ok(())
}

fn load_sites(paths: &[PathBuf], basis: &BasisConfig) -> Result<Vec<SiteData>, Error> {
    paths.iter().map(|p| load_site(p, basis)).collect()
}

/// Data files are validated against the support before the degree matters.
fn support_only(upper: f64, quad: usize) -> BasisConfig {
    BasisConfig::new(0, upper).with_quad_order(quad)
}

fn parse_grid(spec: &str) -> Result<Vec<f64>, Error> {
    let bad = || Error::InvalidConfig(format!("grid {spec:?} must look like t0:t1:points"));
    let parts: Vec<&str> = spec.split(':').collect();
    let [t0, t1, n] = parts.as_slice() else {
        return Err(bad());
    };
    let t0: f64 = t0.parse().map_err(|_| bad())?;
    let t1: f64 = t1.parse().map_err(|_| bad())?;
    let n: usize = n.parse().map_err(|_| bad())?;
    if n == 0 || t1 < t0 || (n == 1 && t1 != t0) {
        return Err(bad());
    }
    if n == 1 {
        return Ok(vec![t0]);
    }
    let step = (t1 - t0) / (n - 1) as f64;
    Ok((0..n)
        .map(|i| if i == n - 1 { t1 } else { t0 + step * i as f64 })
        .collect())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CovariateSpec {
    Values(Vec<f64>),
    Named(std::collections::BTreeMap<String, f64>),
}

fn covariate_vector(spec: CovariateSpec, names: &[String]) -> Result<Vec<f64>, Error> {
    match spec {
        CovariateSpec::Values(v) => Ok(v),
        CovariateSpec::Named(map) => {
            if let Some(extra) = map.keys().find(|k| !names.contains(k)) {
                return Err(Error::InvalidConfig(format!("unknown covariate {extra:?}")));
            }
            names
                .iter()
                .map(|n| {
                    map.get(n)
                        .copied()
                        .ok_or_else(|| Error::InvalidConfig(format!("covariate {n:?} is missing")))
                })
                .collect()
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Error> {
    match path {
        Some(p) => Ok(serde_json::from_str(&read_text(p)?)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(command: Command, solver: SolverConfig) -> Result<(), Failure> {
    match command {
        Command::FitLocal { data, basis, out } => {
            let cfg = basis.config();
            cfg.validate().stage("fit-local")?;
            let site = load_site(&data, &cfg).stage("reading site data")?;
            let params = site.n_covariates() + cfg.n_basis();
            if site.events() < params {
                log::warn!(
                    "site 1 has {} events for {params} parameters; start the chain at the largest site",
                    site.events()
                );
            }
            let payload = fit_local(&site, &cfg, &solver).stage("fit-local")?;
            write_payload(&payload, &out).stage("writing payload")?;
        }
        Command::Renew {
            data,
            payload,
            out,
            degree,
            upper_bound,
            quad,
        } => {
            let incoming = read_payload(&payload).stage("reading payload")?;
            let site = load_site(&data, &incoming.basis).stage("reading site data")?;
            let next = match (degree, upper_bound) {
                (Some(p), Some(b)) => {
                    let contract = BasisConfig::new(p, b).with_quad_order(quad.unwrap_or(DEFAULT_QUAD_ORDER));
                    renew_with_contract(&incoming, &site, &contract, &solver)
                }
                _ => renew(&incoming, &site, &solver),
            }
            .stage("renew")?;
            write_payload(&next, &out).stage("writing payload")?;
        }
        Command::Finalize { payload, variance, out } => {
            let mode: VarianceMode = variance.parse().stage("finalize")?;
            let payload = read_payload(&payload).stage("reading payload")?;
            let report = finalize(&payload, mode).stage("finalize")?;
            with_output(out.as_deref(), |w| write_report_csv(&report, w)).stage("writing report")?;
        }
        Command::Survival {
            payload,
            covariates,
            grid,
            out,
        } => {
            let payload = read_payload(&payload).stage("reading payload")?;
            let spec: CovariateSpec = read_text(&covariates)
                .and_then(|s| serde_json::from_str(&s).map_err(Error::from))
                .stage("reading covariates")?;
            let x = covariate_vector(spec, &payload.covariate_names).stage("reading covariates")?;
            let grid = parse_grid(&grid).stage("survival")?;
            let curve = survival_curve(&payload, &x, &grid).stage("survival")?;
            with_output(out.as_deref(), |w| write_curve_csv(&curve, w)).stage("writing curve")?;
        }
        Command::SelectDegree {
            data,
            candidates,
            upper_bound,
            quad,
            out,
        } => {
            let template = support_only(upper_bound, quad);
            template.validate().stage("select-degree")?;
            let site = load_site(&data, &template).stage("reading site data")?;
            let sel = select_degree(&site, &candidates, &template, &solver).stage("select-degree")?;
            eprintln!("selected degree {}", sel.chosen);
            with_output(out.as_deref(), |w| write_aic_csv(&sel.table, w)).stage("writing AIC table")?;
        }
        Command::Oracle { data, basis, out } => {
            let cfg = basis.config();
            cfg.validate().stage("oracle")?;
            let sites = load_sites(&data, &cfg).stage("reading site data")?;
            let report = oracle_fit_sites(&sites, &cfg, &solver).stage("oracle")?;
            with_output(out.as_deref(), |w| write_report_csv(&report, w)).stage("writing report")?;
        }
        Command::Meta { data, basis, out } => {
            let cfg = basis.config();
            cfg.validate().stage("meta")?;
            let sites = load_sites(&data, &cfg).stage("reading site data")?;
            let input = MetaInput::fit_sites(&sites, &cfg, &solver, Execution::default()).stage("meta")?;
            let report = meta_combine(&input).stage("meta")?;
            if report.excluded_sites > 0 {
                log::warn!("{} site(s) failed to fit and were excluded", report.excluded_sites);
            }
            with_output(out.as_deref(), |w| write_report_csv(&report, w)).stage("writing report")?;
        }
        Command::Generate {
            config,
            layout,
            seed,
            out_dir,
        } => {
            let cfg = load_config(config.as_deref()).stage("reading config")?;
            let layout: Layout = layout.parse().stage("generate")?;
            let exp = cfg.prepare(Execution::default()).stage("calibration")?;
            let sizes = exp.design.site_pattern.sizes(layout.n_sites);
            let data = gen_dataset(&exp.design, &sizes, exp.basis.upper, seed, Execution::default()).stage("generate")?;
            std::fs::create_dir_all(&out_dir).stage("generate")?;
            for (k, site) in data.sites.iter().enumerate() {
                let path = out_dir.join(format!("site_{:02}.csv", k + 1));
                let w = create(&path).stage("writing site data")?;
                write_site_csv(site, w).stage("writing site data")?;
            }
            let meta = serde_json::json!({
                "upper_bound": exp.basis.upper,
                "censoring_rate": exp.design.censoring_rate,
                "event_rate": data.event_rate,
                "true_beta": data.true_beta,
                "seed": seed,
            });
            let mut w = create(&out_dir.join("dataset.json")).stage("writing site data")?;
            writeln!(w, "{}", serde_json::to_string_pretty(&meta).expect("plain values")).stage("writing site data")?;
        }
        Command::Simulate {
            config,
            layout,
            reps,
            seed,
            out,
            manifest,
        } => {
            let cfg = load_config(config.as_deref()).stage("reading config")?;
            let layout: Layout = layout.parse().stage("simulate")?;
            let exp = cfg.prepare(Execution::default()).stage("calibration")?;
            let result = run_experiment(&exp, layout, reps, seed, Execution::default()).stage("simulate")?;
            let w = create(&out).stage("writing metrics")?;
            write_metrics_csv(&result.rows, w).stage("writing metrics")?;
            let manifest_path = manifest.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".manifest.json");
                PathBuf::from(p)
            });
            let m = ExperimentManifest::new(&exp, layout, reps, seed, &result);
            let mut w = create(&manifest_path).stage("writing manifest")?;
            writeln!(w, "{}", serde_json::to_string_pretty(&m).stage("writing manifest")?).stage("writing manifest")?;
        }
    }
    Ok(())
}
