use std::ffi::OsString;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use super::config::{Experiment, ExperimentConfig, Grid};
use super::experiments::{kappa_table, run_asymptotics, run_coverage, run_debias, run_mse, run_timing, ReplicationReport};
use super::meta::{companion_path, sidecar_path, RunMeta};
use super::table::{ensure_parent, indexed, num, Table};
use crate::asymptotics::bundle;
use crate::design::{estimate_sigma2, export_bundle, gen_design, gen_response, import_bundle, transform_with, Design, DesignDist};
use crate::error::{Error, Result};
use crate::estimators::{debias, fit_mom, fit_veb, EstimateReport, Method};
use crate::inference::{ci_adjusted, ci_eb, make_q, QLabel};
use crate::meanfield::{solve_fixed_point, MfOptions};
use crate::optimize::OptimOptions;
use crate::posterior_oracle::{elbo_gap, exact_enumerate, fit_exact_mml};
use crate::priors::{FamilyId, PriorFamily, PriorSpec};
use crate::rng::seeded;

#[derive(Parser, Debug)]
#[command(name = "mfeb", version, about = "Variational empirical Bayes for linear regression: estimation, inference and simulation studies")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Fit prior hyperparameters to a data bundle (X.csv, y.csv, meta.json).
    Estimate(EstimateArgs),
    /// Draw a synthetic regression instance and write it as a data bundle.
    Generate(GenerateArgs),
    /// Run the experiment a config describes (squared-error study for `mse`).
    Simulate(RunArgs),
    /// Credible-interval width and coverage study.
    Coverage(RunArgs),
    /// Bias of the vEB estimator against its debiased version.
    Debias(RunArgs),
    /// Wall-clock study of the estimators.
    Timing(RunArgs),
    /// Limiting variance, bias functional and interval inflation along a θ grid.
    Asymptotics(AsymptoticsArgs),
    /// Exact posterior, marginal likelihood and MML estimate for the Bernoulli prior (p ≤ 20).
    Enumerate(EnumerateArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Experiment config (JSON); `-` reads standard input.
    #[arg(long)]
    config: String,
    /// Per-replicate CSV; aggregates go to `<stem>_summary.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    /// Override the replicate count.
    #[arg(long)]
    replicates: Option<usize>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EstimateArgs {
    /// Directory with X.csv, y.csv and meta.json.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    family: Option<String>,
    /// Comma-separated subset of veb, mom, debiased, exact_mml.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    /// Noise variance; defaults to the bundle's recorded value.
    #[arg(long)]
    sigma2: Option<f64>,
    /// Use the least-squares residual variance.
    #[arg(long)]
    estimate_sigma2: bool,
    /// Write the mean-field solution at the vEB estimate to this CSV.
    #[arg(long)]
    meanfield: Option<PathBuf>,
    /// Write EB and adjusted EB intervals for the average and contrast directions.
    #[arg(long)]
    intervals: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    /// JSON file with the same fields; `-` reads standard input.
    #[arg(long)]
    #[serde(skip)]
    config: Option<String>,
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct GenerateArgs {
    #[arg(long)]
    family: String,
    /// Comma-separated true parameter.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    theta: Vec<f64>,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    p: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma2: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "gaussian")]
    design: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AsymptoticsArgs {
    #[arg(long)]
    family: Option<String>,
    /// Base parameter for the coordinates not on the grid.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    theta: Vec<f64>,
    /// `start:stop:step`.
    #[arg(long, allow_hyphen_values = true)]
    theta_grid: Option<String>,
    /// Coordinate of θ the grid runs over.
    #[arg(long, default_value_t = 0)]
    coord: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma2: f64,
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EnumerateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Inclusion probability for the posterior summary.
    #[arg(long)]
    pi: Option<f64>,
    #[arg(long)]
    sigma2: Option<f64>,
    /// Grid step for the exact MML estimate.
    #[arg(long)]
    grid_step: Option<f64>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<String>,
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Estimate(a) => estimate(a),
        Cmd::Generate(a) => generate(a),
        Cmd::Simulate(a) => experiment(a, None, "simulate"),
        Cmd::Coverage(a) => experiment(a, Some(Experiment::Coverage), "coverage"),
        Cmd::Debias(a) => experiment(a, Some(Experiment::Debias), "debias"),
        Cmd::Timing(a) => experiment(a, Some(Experiment::Timing), "timing"),
        Cmd::Asymptotics(a) => asymptotics(a),
        Cmd::Enumerate(a) => enumerate(a),
    }
}

fn read_source(src: &str) -> Result<String> {
    if src == "-" {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        Ok(s)
    } else {
        std::fs::read_to_string(src).map_err(|e| Error::Config(format!("cannot read {src}: {e}")))
    }
}

fn parse_family(s: &str) -> Result<FamilyId> {
    FamilyId::parse(s)
}

fn parse_method(s: &str) -> Result<Method> {
    match s.trim() {
        "veb" => Ok(Method::Veb),
        "mom" => Ok(Method::Mom),
        "debiased" => Ok(Method::Debiased),
        "exact_mml" | "mml" => Ok(Method::ExactMml),
        other => Err(Error::Config(format!("unknown method {other:?}"))),
    }
}

fn emit(table: &Table, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => table.write(p),
        None => {
            print!("{}", table.to_csv_string()?);
            Ok(())
        }
    }
}

fn experiment(a: RunArgs, expect: Option<Experiment>, command: &str) -> Result<()> {
    let mut cfg = ExperimentConfig::from_json(&read_source(&a.config)?)?;
    if let Some(e) = expect {
        if cfg.experiment != e {
            return Err(Error::Config(format!("`{command}` needs a {} config, got {}", e.name(), cfg.experiment.name())));
        }
    }
    if let Some(r) = a.replicates {
        cfg.replicates = r;
    }
    if let Some(s) = a.seed {
        cfg.master_seed = s;
    }
    if a.threads.is_some() {
        cfg.threads = a.threads;
    }
    cfg.validate()?;
    let mut meta = RunMeta::new(command, &cfg, Some(cfg.master_seed))?;
    if cfg.experiment == Experiment::Asymptotics {
        let t = kappa_table(&run_asymptotics(&cfg)?);
        emit(&t, a.out.as_deref())?;
        if let Some(out) = &a.out {
            meta.outputs.push(out.display().to_string());
            meta.write(&sidecar_path(out))?;
        }
        return Ok(());
    }
    let report = match cfg.experiment {
        Experiment::Mse => run_mse(&cfg)?,
        Experiment::Coverage => run_coverage(&cfg)?,
        Experiment::Debias => run_debias(&cfg)?,
        Experiment::Timing => run_timing(&cfg)?,
        Experiment::Asymptotics => unreachable!(),
    };
    report.verify()?;
    write_report(&report, a.out.as_deref(), &mut meta)
}

fn write_report(report: &ReplicationReport, out: Option<&Path>, meta: &mut RunMeta) -> Result<()> {
    let coverage = report.experiment == Experiment::Coverage;
    let summary = if coverage { report.coverage_table() } else { report.methods_table() };
    let Some(out) = out else {
        return emit(&summary, None);
    };
    let mut files: Vec<(PathBuf, Table)> = Vec::new();
    if coverage {
        files.push((out.to_path_buf(), report.intervals_table()));
        files.push((companion_path(out, "estimates"), report.estimates_table()));
    } else {
        files.push((out.to_path_buf(), report.estimates_table()));
    }
    files.push((companion_path(out, "summary"), summary));
    if report.experiment == Experiment::Debias {
        files.push((companion_path(out, "hist"), report.histogram_table()));
    }
    files.push((companion_path(out, "failures"), report.failures_table()));
    for (path, t) in &files {
        t.write(path)?;
        meta.outputs.push(path.display().to_string());
    }
    meta.summary = Some(serde_json::json!({
        "failures": report.failures.len(),
        "rows": report.estimates.len() + report.intervals.len(),
    }));
    meta.write(&sidecar_path(out))
}

fn estimate(mut a: EstimateArgs) -> Result<()> {
    if let Some(src) = a.config.take() {
        let out = a.out.take();
        a = serde_json::from_str(&read_source(&src)?).map_err(|e| Error::Config(format!("config: {e}")))?;
        a.out = out;
    }
    let data = a.data.clone().ok_or_else(|| Error::Config("--data is required".into()))?;
    let id = parse_family(a.family.as_deref().ok_or_else(|| Error::Config("--family is required".into()))?)?;
    let methods: Vec<Method> = if a.methods.is_empty() {
        vec![Method::Veb]
    } else {
        a.methods.iter().map(|m| parse_method(m)).collect::<Result<_>>()?
    };
    let alpha = a.alpha.unwrap_or(0.1);
    let inst = import_bundle(&data)?;
    let sigma2 = if a.estimate_sigma2 { estimate_sigma2(&inst)? } else { a.sigma2.unwrap_or(inst.sigma2) };
    let td = transform_with(&inst, sigma2);
    let center: Vec<f64> = id.default_box().iter().map(|b| 0.5 * (b[0] + b[1])).collect();
    let fam = PriorFamily::new(id, &center)?;
    let (n, p) = (inst.n(), inst.p());

    let mut reports: Vec<EstimateReport> = Vec::new();
    let mut veb: Option<EstimateReport> = None;
    let need_veb = methods.iter().any(|m| matches!(m, Method::Veb | Method::Debiased)) || a.meanfield.is_some() || a.intervals.is_some();
    if need_veb {
        veb = Some(fit_veb(&td, &fam, &OptimOptions::default())?);
    }
    for m in &methods {
        reports.push(match m {
            Method::Veb => veb.clone().expect("fitted"),
            Method::Mom => fit_mom(&td, &fam)?,
            Method::ExactMml => fit_exact_mml(&td, &fam, 1e-4)?,
            Method::Debiased => {
                let v = veb.as_ref().expect("fitted");
                let asy = bundle(&fam.at(&v.theta_hat)?, td.d0)?;
                debias(&v.theta_hat, &fam, n, p, &asy)?
            }
        });
    }
    let k = fam.k();
    let mut header = vec!["method".to_string()];
    header.extend(indexed("theta_hat", k));
    header.extend(["objective_value", "iterations", "converged", "clamped", "wall_time"].map(String::from));
    let mut t = Table::new(header);
    for r in &reports {
        let mut row = vec![r.method.name().to_string()];
        row.extend(r.theta_hat.iter().map(|&x| num(x)));
        row.extend([num(r.objective_value), r.iterations.to_string(), r.converged.to_string(), r.clamped.to_string(), num(r.wall_time)]);
        t.push(row);
    }
    emit(&t, a.out.as_deref())?;

    let mut meta = RunMeta::new("estimate", &a, None)?;
    if let Some(v) = &veb {
        let fam_hat = fam.at(&v.theta_hat)?;
        if a.meanfield.is_some() || a.intervals.is_some() {
            let sol = solve_fixed_point(&td, &fam_hat, &MfOptions::default())?;
            if let Some(path) = &a.meanfield {
                ensure_parent(path)?;
                sol.write_csv(std::fs::File::create(path)?)?;
                meta.outputs.push(path.display().to_string());
            }
            if let Some(path) = &a.intervals {
                let asy = bundle(&fam_hat, td.d0)?;
                let mut ct = Table::new(["q_label", "kind", "center", "width", "lower", "upper"]);
                for label in [QLabel::Avg, QLabel::Contrast] {
                    let Ok(q) = make_q(label, p) else { continue };
                    for ci in [ci_eb(&sol, &q, alpha)?, ci_adjusted(&sol, &q, alpha, &asy)?] {
                        ct.push(vec![
                            label.name().into(),
                            ci.kind.name().into(),
                            num(ci.center),
                            num(ci.width()),
                            num(ci.lower()),
                            num(ci.upper()),
                        ]);
                    }
                }
                ct.write(path)?;
                meta.outputs.push(path.display().to_string());
            }
        }
    }
    if let Some(out) = &a.out {
        meta.outputs.push(out.display().to_string());
        meta.summary = Some(serde_json::json!({ "n": n, "p": p, "sigma2": sigma2 }));
        meta.write(&sidecar_path(out))?;
    }
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let fam = PriorFamily::new(parse_family(&a.family)?, &a.theta)?;
    let dist = match a.design.as_str() {
        "gaussian" => DesignDist::Gaussian,
        "rademacher" => DesignDist::Rademacher,
        other => return Err(Error::Config(format!("unknown design distribution {other:?}"))),
    };
    let mut rng = seeded(a.seed);
    let design = Arc::new(Design::new(gen_design(a.n, a.p, dist, &mut rng)?));
    let inst = gen_response(design, &fam, a.sigma2, &mut rng)?;
    export_bundle(&inst, &a.out)?;
    let mut meta = RunMeta::new("generate", &a, Some(a.seed))?;
    meta.outputs.push(a.out.display().to_string());
    meta.write(&a.out.join("generate.meta.json"))
}

fn asymptotics(a: AsymptoticsArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(src) => ExperimentConfig::from_json(&read_source(src)?)?,
        None => {
            let id = parse_family(a.family.as_deref().ok_or_else(|| Error::Config("--family is required".into()))?)?;
            let grid = Grid::parse(a.theta_grid.as_deref().ok_or_else(|| Error::Config("--theta-grid is required".into()))?)?;
            let mut theta: Vec<f64> = if a.theta.is_empty() {
                id.default_box().iter().map(|b| 0.5 * (b[0] + b[1])).collect()
            } else {
                a.theta.clone()
            };
            if a.coord < theta.len() {
                theta[a.coord] = grid.values()?[0];
            }
            let mut cfg = ExperimentConfig::new(Experiment::Asymptotics, PriorSpec { family: id, theta, theta_box: None });
            cfg.theta_grid = Some(grid);
            cfg.grid_coord = a.coord;
            cfg.sigma2 = a.sigma2;
            cfg.validate()?;
            cfg
        }
    };
    if cfg.experiment != Experiment::Asymptotics {
        return Err(Error::Config(format!("`asymptotics` needs an asymptotics config, got {}", cfg.experiment.name())));
    }
    let t = kappa_table(&run_asymptotics(&cfg)?);
    emit(&t, a.out.as_deref())?;
    if let Some(out) = &a.out {
        let mut meta = RunMeta::new("asymptotics", &cfg, None)?;
        meta.outputs.push(out.display().to_string());
        meta.write(&sidecar_path(out))?;
    }
    Ok(())
}

fn enumerate(mut a: EnumerateArgs) -> Result<()> {
    if let Some(src) = a.config.take() {
        let out = a.out.take();
        a = serde_json::from_str(&read_source(&src)?).map_err(|e| Error::Config(format!("config: {e}")))?;
        a.out = out;
    }
    let data = a.data.clone().ok_or_else(|| Error::Config("--data is required".into()))?;
    let inst = import_bundle(&data)?;
    let td = transform_with(&inst, a.sigma2.unwrap_or(inst.sigma2));
    let pi = a.pi.unwrap_or(0.5);
    let fam = PriorFamily::new(FamilyId::Bernoulli, &[pi])?;
    let exact = exact_enumerate(&td, &fam)?;
    let gap = elbo_gap(&td, &fam)?;
    let mml = fit_exact_mml(&td, &fam, a.grid_step.unwrap_or(1e-4))?;
    let veb = fit_veb(&td, &fam, &OptimOptions::default())?;
    let mut t = Table::new(["i", "mean", "var"]);
    for i in 0..td.p() {
        t.push(vec![(i + 1).to_string(), num(exact.summary.mean[i]), num(exact.summary.var[i])]);
    }
    emit(&t, a.out.as_deref())?;
    let summary = serde_json::json!({
        "pi": pi,
        "log_marginal": exact.log_marginal,
        "elbo_gap": gap,
        "exact_mml_pi": mml.theta_hat[0],
        "veb_pi": veb.theta_hat[0],
    });
    eprintln!("{summary}");
    if let Some(out) = &a.out {
        let mut meta = RunMeta::new("enumerate", &a, None)?;
        meta.outputs.push(out.display().to_string());
        meta.summary = Some(summary);
        meta.write(&sidecar_path(out))?;
    }
    Ok(())
}
