use std::sync::Arc;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DesignMode, Experiment, ExperimentConfig};
use super::table::{indexed, num, Table};
use crate::asymptotics::bundle;
use crate::design::{estimate_sigma2, gen_design, gen_response, transform, transform_with, Design, RegressionInstance, TransformedData};
use crate::error::{Error, Result};
use crate::estimators::{debias, fit_mom, fit_veb, EstimateReport, Method};
use crate::inference::{ci_adjusted, ci_eb, ci_oracle, coverage_eval, make_q, CiKind, CredibleInterval, ProjectionSpec};
use crate::meanfield::{solve_fixed_point, MfOptions};
use crate::optimize::OptimOptions;
use crate::posterior_oracle::{fit_exact_mml, gibbs_sample, GibbsConfig, GibbsInit};
use crate::priors::PriorFamily;
use crate::rng::{stream, Purpose};

pub const EXACT_MML_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub p: usize,
    pub n: usize,
    pub method: Method,
    pub replicate: usize,
    pub theta_hat: Vec<f64>,
    pub sq_err: f64,
    pub converged: bool,
    pub clamped: bool,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub p: usize,
    pub n: usize,
    pub method: Method,
    pub count: usize,
    pub nonconverged: usize,
    pub clamped: usize,
    pub mse: f64,
    pub mse_se: f64,
    pub bias: Vec<f64>,
    pub variance: Vec<f64>,
    pub mean_wall_time: f64,
    pub median_wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRow {
    pub p: usize,
    pub n: usize,
    pub replicate: usize,
    pub q_label: String,
    pub kind: CiKind,
    pub center: f64,
    pub width: f64,
    /// Whether a single fresh draw from the oracle posterior falls inside.
    pub covered: bool,
    /// Fraction of the retained oracle-posterior draws inside.
    pub cond_coverage: f64,
    pub truth_covered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub p: usize,
    pub n: usize,
    pub q_label: String,
    pub kind: CiKind,
    pub count: usize,
    pub width_mean: f64,
    pub coverage: f64,
    pub coverage_se: f64,
    pub cond_coverage: f64,
    pub cond_coverage_se: f64,
    pub truth_coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub p: usize,
    pub n: usize,
    pub method: Method,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRow {
    pub p: usize,
    pub replicate: usize,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub experiment: Experiment,
    pub prior: String,
    pub theta0: Vec<f64>,
    pub estimates: Vec<EstimateRow>,
    pub methods: Vec<MethodSummary>,
    pub intervals: Vec<IntervalRow>,
    pub coverage: Vec<CoverageSummary>,
    pub histograms: Vec<HistogramRow>,
    pub failures: Vec<FailureRow>,
}

#[derive(Default)]
struct Outcome {
    estimates: Vec<EstimateRow>,
    intervals: Vec<IntervalRow>,
    failures: Vec<FailureRow>,
}

impl Outcome {
    fn fail(&mut self, p: usize, replicate: usize, stage: &str, e: &Error) {
        self.failures.push(FailureRow { p, replicate, stage: stage.into(), message: e.to_string() });
    }
}

struct Cell<'a> {
    cfg: &'a ExperimentConfig,
    fam0: PriorFamily,
    p: usize,
    n: usize,
    fixed: Option<Arc<Design>>,
}

impl Cell<'_> {
    fn new(cfg: &ExperimentConfig, p: usize) -> Result<Cell<'_>> {
        let n = cfg.n_rule.n(p);
        let fixed = match cfg.design_mode {
            DesignMode::FixedAcrossReplicates => {
                let mut rng = stream(cfg.master_seed, Purpose::Design, p, 0);
                Some(Arc::new(Design::new(gen_design(n, p, cfg.design_dist, &mut rng)?)))
            }
            DesignMode::FreshPerReplicate => None,
        };
        Ok(Cell { cfg, fam0: cfg.family()?, p, n, fixed })
    }

    fn instance(&self, rep: usize) -> Result<(RegressionInstance, TransformedData)> {
        let design = match &self.fixed {
            Some(d) => d.clone(),
            None => {
                let mut rng = stream(self.cfg.master_seed, Purpose::Design, self.p, rep as u64 + 1);
                Arc::new(Design::new(gen_design(self.n, self.p, self.cfg.design_dist, &mut rng)?))
            }
        };
        let mut rng = stream(self.cfg.master_seed, Purpose::Replicate, self.p, rep as u64);
        let inst = gen_response(design, &self.fam0, self.cfg.sigma2, &mut rng)?;
        let td = if self.cfg.estimate_sigma2 { transform_with(&inst, estimate_sigma2(&inst)?) } else { transform(&inst) };
        Ok((inst, td))
    }

    fn row(&self, rep: usize, r: &EstimateReport, extra_time: f64) -> EstimateRow {
        EstimateRow {
            p: self.p,
            n: self.n,
            method: r.method,
            replicate: rep,
            sq_err: sq_err(&r.theta_hat, self.fam0.theta()),
            theta_hat: r.theta_hat.clone(),
            converged: r.converged,
            clamped: r.clamped,
            wall_time: r.wall_time + extra_time,
        }
    }

    /// Runs every requested estimator; the debiased estimator reuses the vEB fit.
    fn estimates(&self, rep: usize, td: &TransformedData, methods: &[Method], out: &mut Outcome) -> Option<EstimateReport> {
        let mut veb: Option<EstimateReport> = None;
        let want_veb = methods.iter().any(|m| matches!(m, Method::Veb | Method::Debiased));
        if want_veb {
            match fit_veb(td, &self.fam0, &OptimOptions::default()) {
                Ok(r) => veb = Some(r),
                Err(e) => out.fail(self.p, rep, "veb", &e),
            }
        }
        for &m in methods {
            let res = match m {
                Method::Veb => veb.clone().map(|r| (r, 0.0)).ok_or(None),
                Method::Mom => fit_mom(td, &self.fam0).map(|r| (r, 0.0)).map_err(Some),
                Method::ExactMml => fit_exact_mml(td, &self.fam0, EXACT_MML_STEP).map(|r| (r, 0.0)).map_err(Some),
                Method::Debiased => match &veb {
                    None => Err(None),
                    Some(v) => self.debiased(td, v).map(|r| (r, v.wall_time)).map_err(Some),
                },
            };
            match res {
                Ok((r, extra)) => out.estimates.push(self.row(rep, &r, extra)),
                Err(Some(e)) => out.fail(self.p, rep, m.name(), &e),
                Err(None) => {}
            }
        }
        veb
    }

    fn debiased(&self, td: &TransformedData, veb: &EstimateReport) -> Result<EstimateReport> {
        let clock = crate::timing::Stopwatch::start();
        let asy = bundle(&self.fam0.at(&veb.theta_hat)?, td.d0)?;
        let mut r = debias(&veb.theta_hat, &self.fam0, self.n, self.p, &asy)?;
        r.wall_time = clock.seconds();
        Ok(r)
    }

    fn estimate_replicate(&self, rep: usize, methods: &[Method]) -> Outcome {
        let mut out = Outcome::default();
        match self.instance(rep) {
            Ok((_, td)) => {
                self.estimates(rep, &td, methods, &mut out);
            }
            Err(e) => out.fail(self.p, rep, "instance", &e),
        }
        out
    }

    fn coverage_replicate(&self, rep: usize, specs: &[ProjectionSpec]) -> Outcome {
        let mut out = Outcome::default();
        if let Err(e) = self.coverage_inner(rep, specs, &mut out) {
            out.fail(self.p, rep, "coverage", &e);
            out.intervals.clear();
        }
        out
    }

    fn coverage_inner(&self, rep: usize, specs: &[ProjectionSpec], out: &mut Outcome) -> Result<()> {
        let (inst, td) = self.instance(rep)?;
        let Some(veb) = self.estimates(rep, &td, &[Method::Veb], out) else {
            return Err(Error::Numerical("vEB fit failed".into()));
        };
        let fam_hat = self.fam0.at(&veb.theta_hat)?;
        let asy = bundle(&fam_hat, td.d0)?;
        let mf = MfOptions::default();
        let sol_hat = solve_fixed_point(&td, &fam_hat, &mf)?;
        let sol_0 = solve_fixed_point(&td, &self.fam0, &mf)?;
        let seed = stream(self.cfg.master_seed, Purpose::Posterior, self.p, rep as u64).next_u64();
        let gcfg = GibbsConfig::new(self.cfg.gibbs_sweeps, GibbsInit::AtTruth(inst.beta_star.as_slice().to_vec()), seed);
        let post = gibbs_sample(&td, &self.fam0, &gcfg, specs)?;
        for q in specs {
            let label = q.label.name();
            let draws = &post.proj_draws[label];
            let fresh = *draws.last().ok_or_else(|| Error::Contract("no retained draws".into()))?;
            let truth = q.project(inst.beta_star.as_slice());
            let cis: [CredibleInterval; 3] = [
                ci_oracle(&sol_0, q, self.cfg.alpha)?,
                ci_eb(&sol_hat, q, self.cfg.alpha)?,
                ci_adjusted(&sol_hat, q, self.cfg.alpha, &asy)?,
            ];
            for ci in cis {
                out.intervals.push(IntervalRow {
                    p: self.p,
                    n: self.n,
                    replicate: rep,
                    q_label: label.into(),
                    kind: ci.kind,
                    center: ci.center,
                    width: ci.width(),
                    covered: ci.contains(fresh),
                    cond_coverage: coverage_eval(&ci, draws)?,
                    truth_covered: ci.contains(truth),
                });
            }
        }
        Ok(())
    }
}

fn sq_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

pub fn median(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn run_replicates<F>(cfg: &ExperimentConfig, parallel: bool, f: F) -> Result<Outcome>
where
    F: Fn(usize) -> Outcome + Sync,
{
    let outcomes: Vec<Outcome> = if parallel {
        let go = || (0..cfg.replicates).into_par_iter().map(&f).collect();
        match cfg.threads {
            Some(t) => rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?
                .install(go),
            None => go(),
        }
    } else {
        (0..cfg.replicates).map(&f).collect()
    };
    let mut all = Outcome::default();
    for o in outcomes {
        all.estimates.extend(o.estimates);
        all.intervals.extend(o.intervals);
        all.failures.extend(o.failures);
    }
    Ok(all)
}

fn summarize_methods(rows: &[EstimateRow], theta0: &[f64], p: usize, n: usize, methods: &[Method]) -> Vec<MethodSummary> {
    let k = theta0.len();
    methods
        .iter()
        .filter_map(|&m| {
            let rs: Vec<&EstimateRow> = rows.iter().filter(|r| r.p == p && r.method == m).collect();
            if rs.is_empty() {
                return None;
            }
            let errs: Vec<f64> = rs.iter().map(|r| r.sq_err).collect();
            let times: Vec<f64> = rs.iter().map(|r| r.wall_time).collect();
            let coord = |j: usize| -> Vec<f64> { rs.iter().map(|r| r.theta_hat[j]).collect() };
            Some(MethodSummary {
                p,
                n,
                method: m,
                count: rs.len(),
                nonconverged: rs.iter().filter(|r| !r.converged).count(),
                clamped: rs.iter().filter(|r| r.clamped).count(),
                mse: mean(&errs),
                mse_se: (sample_var(&errs) / errs.len() as f64).sqrt(),
                bias: (0..k).map(|j| mean(&coord(j)) - theta0[j]).collect(),
                variance: (0..k).map(|j| sample_var(&coord(j))).collect(),
                mean_wall_time: mean(&times),
                median_wall_time: median(&times),
            })
        })
        .collect()
}

fn summarize_coverage(rows: &[IntervalRow], p: usize, n: usize) -> Vec<CoverageSummary> {
    let mut keys: Vec<(String, CiKind)> = Vec::new();
    for r in rows.iter().filter(|r| r.p == p) {
        if !keys.iter().any(|(l, k)| *l == r.q_label && *k == r.kind) {
            keys.push((r.q_label.clone(), r.kind));
        }
    }
    keys.into_iter()
        .map(|(label, kind)| {
            let rs: Vec<&IntervalRow> = rows.iter().filter(|r| r.p == p && r.q_label == label && r.kind == kind).collect();
            let c = rs.len() as f64;
            let rate = rs.iter().filter(|r| r.covered).count() as f64 / c;
            let cond: Vec<f64> = rs.iter().map(|r| r.cond_coverage).collect();
            CoverageSummary {
                p,
                n,
                q_label: label,
                kind,
                count: rs.len(),
                width_mean: mean(&rs.iter().map(|r| r.width).collect::<Vec<_>>()),
                coverage: rate,
                coverage_se: (rate * (1.0 - rate) / c).sqrt(),
                cond_coverage: mean(&cond),
                cond_coverage_se: (sample_var(&cond) / c).sqrt(),
                truth_coverage: rs.iter().filter(|r| r.truth_covered).count() as f64 / c,
            }
        })
        .collect()
}

fn histogram(rows: &[EstimateRow], p: usize, n: usize, bins: usize) -> Vec<HistogramRow> {
    let rs: Vec<&EstimateRow> = rows.iter().filter(|r| r.p == p).collect();
    if rs.is_empty() || bins == 0 {
        return Vec::new();
    }
    let (mut lo, mut hi) = rs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| {
        (a.min(r.theta_hat[0]), b.max(r.theta_hat[0]))
    });
    if hi <= lo {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let mut out = Vec::new();
    for m in [Method::Veb, Method::Debiased] {
        let mut counts = vec![0usize; bins];
        for r in rs.iter().filter(|r| r.method == m) {
            let b = (((r.theta_hat[0] - lo) / width).floor() as usize).min(bins - 1);
            counts[b] += 1;
        }
        for (b, c) in counts.into_iter().enumerate() {
            out.push(HistogramRow { p, n, method: m, bin_lo: lo + b as f64 * width, bin_hi: lo + (b + 1) as f64 * width, count: c });
        }
    }
    out
}

impl ReplicationReport {
    fn empty(cfg: &ExperimentConfig) -> Result<Self> {
        let fam = cfg.family()?;
        Ok(ReplicationReport {
            experiment: cfg.experiment,
            prior: fam.id().name().to_string(),
            theta0: fam.theta().to_vec(),
            estimates: Vec::new(),
            methods: Vec::new(),
            intervals: Vec::new(),
            coverage: Vec::new(),
            histograms: Vec::new(),
            failures: Vec::new(),
        })
    }

    fn absorb(&mut self, o: Outcome) {
        self.estimates.extend(o.estimates);
        self.intervals.extend(o.intervals);
        self.failures.extend(o.failures);
    }

    pub fn k(&self) -> usize {
        self.theta0.len()
    }

    pub fn method(&self, p: usize, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.p == p && s.method == m)
    }

    pub fn coverage_for(&self, p: usize, label: &str, kind: CiKind) -> Option<&CoverageSummary> {
        self.coverage.iter().find(|s| s.p == p && s.q_label == label && s.kind == kind)
    }

    /// Recomputes every aggregate from the per-replicate rows.
    pub fn verify(&self) -> Result<()> {
        for s in &self.methods {
            let rs: Vec<&EstimateRow> = self.estimates.iter().filter(|r| r.p == s.p && r.method == s.method).collect();
            let mse = rs.iter().map(|r| r.sq_err).sum::<f64>() / rs.len() as f64;
            if rs.len() != s.count || (mse - s.mse).abs() > 1e-12 {
                return Err(Error::Numerical(format!("aggregate for p={} {} disagrees with its rows", s.p, s.method.name())));
            }
        }
        for s in &self.coverage {
            let rs: Vec<&IntervalRow> =
                self.intervals.iter().filter(|r| r.p == s.p && r.q_label == s.q_label && r.kind == s.kind).collect();
            let rate = rs.iter().filter(|r| r.covered).count() as f64 / rs.len() as f64;
            if rs.len() != s.count || (rate - s.coverage).abs() > 1e-12 {
                return Err(Error::Numerical(format!("coverage aggregate for p={} disagrees with its rows", s.p)));
            }
        }
        Ok(())
    }

    pub fn estimates_table(&self) -> Table {
        let k = self.k();
        let mut header = vec!["prior".to_string(), "p".into(), "n".into(), "method".into(), "replicate".into()];
        header.extend(indexed("theta_hat", k));
        header.extend(["sq_err", "converged", "clamped", "wall_time"].map(String::from));
        let mut t = Table::new(header);
        for r in &self.estimates {
            let mut row = vec![self.prior.clone(), r.p.to_string(), r.n.to_string(), r.method.name().into(), r.replicate.to_string()];
            row.extend(r.theta_hat.iter().map(|&x| num(x)));
            row.extend([num(r.sq_err), r.converged.to_string(), r.clamped.to_string(), num(r.wall_time)]);
            t.push(row);
        }
        t
    }

    pub fn methods_table(&self) -> Table {
        let k = self.k();
        let mut header = vec!["prior".to_string(), "p".into(), "n".into(), "method".into(), "count".into()];
        header.extend(["nonconverged", "clamped", "mse", "mse_se"].map(String::from));
        header.extend(indexed("bias", k));
        header.extend(indexed("variance", k));
        header.extend(["mean_wall_time", "median_wall_time"].map(String::from));
        let mut t = Table::new(header);
        for s in &self.methods {
            let mut row = vec![self.prior.clone(), s.p.to_string(), s.n.to_string(), s.method.name().into(), s.count.to_string()];
            row.extend([s.nonconverged.to_string(), s.clamped.to_string(), num(s.mse), num(s.mse_se)]);
            row.extend(s.bias.iter().map(|&x| num(x)));
            row.extend(s.variance.iter().map(|&x| num(x)));
            row.extend([num(s.mean_wall_time), num(s.median_wall_time)]);
            t.push(row);
        }
        t
    }

    pub fn intervals_table(&self) -> Table {
        let mut t = Table::new([
            "prior", "p", "n", "replicate", "q_label", "kind", "center", "width", "covered", "cond_coverage", "truth_covered",
        ]);
        for r in &self.intervals {
            t.push(vec![
                self.prior.clone(),
                r.p.to_string(),
                r.n.to_string(),
                r.replicate.to_string(),
                r.q_label.clone(),
                r.kind.name().into(),
                num(r.center),
                num(r.width),
                r.covered.to_string(),
                num(r.cond_coverage),
                r.truth_covered.to_string(),
            ]);
        }
        t
    }

    pub fn coverage_table(&self) -> Table {
        let mut t = Table::new([
            "prior",
            "p",
            "n",
            "q_label",
            "kind",
            "count",
            "width_mean",
            "coverage",
            "coverage_se",
            "cond_coverage",
            "cond_coverage_se",
            "truth_coverage",
        ]);
        for s in &self.coverage {
            t.push(vec![
                self.prior.clone(),
                s.p.to_string(),
                s.n.to_string(),
                s.q_label.clone(),
                s.kind.name().into(),
                s.count.to_string(),
                num(s.width_mean),
                num(s.coverage),
                num(s.coverage_se),
                num(s.cond_coverage),
                num(s.cond_coverage_se),
                num(s.truth_coverage),
            ]);
        }
        t
    }

    pub fn histogram_table(&self) -> Table {
        let mut t = Table::new(["prior", "p", "n", "method", "bin_lo", "bin_hi", "count"]);
        for h in &self.histograms {
            t.push(vec![
                self.prior.clone(),
                h.p.to_string(),
                h.n.to_string(),
                h.method.name().into(),
                num(h.bin_lo),
                num(h.bin_hi),
                h.count.to_string(),
            ]);
        }
        t
    }

    pub fn failures_table(&self) -> Table {
        let mut t = Table::new(["p", "replicate", "stage", "message"]);
        for f in &self.failures {
            t.push(vec![f.p.to_string(), f.replicate.to_string(), f.stage.clone(), f.message.clone()]);
        }
        t
    }
}

fn require(cfg: &ExperimentConfig, e: Experiment) -> Result<()> {
    cfg.validate()?;
    if cfg.experiment != e {
        return Err(Error::Config(format!("config describes a {} experiment, not {}", cfg.experiment.name(), e.name())));
    }
    Ok(())
}

fn estimation_study(cfg: &ExperimentConfig, methods: &[Method], parallel: bool) -> Result<ReplicationReport> {
    let mut report = ReplicationReport::empty(cfg)?;
    for &p in &cfg.p_grid {
        let cell = Cell::new(cfg, p)?;
        let out = run_replicates(cfg, parallel, |rep| cell.estimate_replicate(rep, methods))?;
        report.methods.extend(summarize_methods(&out.estimates, cell.fam0.theta(), p, cell.n, methods));
        report.absorb(out);
    }
    Ok(report)
}

/// Squared-error study of every configured estimator over the `p` grid.
pub fn run_mse(cfg: &ExperimentConfig) -> Result<ReplicationReport> {
    require(cfg, Experiment::Mse)?;
    estimation_study(cfg, &cfg.estimators, true)
}

/// Wall-clock study; replicates run sequentially so timings do not contend.
pub fn run_timing(cfg: &ExperimentConfig) -> Result<ReplicationReport> {
    require(cfg, Experiment::Timing)?;
    estimation_study(cfg, &cfg.estimators, false)
}

/// Bias and variance of the vEB and debiased estimators, with histograms for
/// the grid points closest to `p = √n` and `p = n^{2/3}`.
pub fn run_debias(cfg: &ExperimentConfig) -> Result<ReplicationReport> {
    require(cfg, Experiment::Debias)?;
    let mut report = estimation_study(cfg, &[Method::Veb, Method::Debiased], true)?;
    let mut panels: Vec<usize> = Vec::new();
    for e in [0.5, 2.0 / 3.0] {
        let closest = cfg
            .p_grid
            .iter()
            .copied()
            .min_by(|&a, &b| {
                let da = (a as f64 - (cfg.n_rule.n(a) as f64).powf(e)).abs();
                let db = (b as f64 - (cfg.n_rule.n(b) as f64).powf(e)).abs();
                da.total_cmp(&db)
            })
            .expect("non-empty grid");
        if !panels.contains(&closest) {
            panels.push(closest);
        }
    }
    for p in panels {
        report.histograms.extend(histogram(&report.estimates, p, cfg.n_rule.n(p), cfg.histogram_bins));
    }
    Ok(report)
}

/// Oracle, EB and adjusted EB intervals evaluated against Gibbs draws from
/// the oracle posterior.
pub fn run_coverage(cfg: &ExperimentConfig) -> Result<ReplicationReport> {
    require(cfg, Experiment::Coverage)?;
    let mut report = ReplicationReport::empty(cfg)?;
    for &p in &cfg.p_grid {
        let cell = Cell::new(cfg, p)?;
        let specs: Vec<ProjectionSpec> = cfg.q_labels.iter().map(|&l| make_q(l, p)).collect::<Result<_>>()?;
        let out = run_replicates(cfg, true, |rep| cell.coverage_replicate(rep, &specs))?;
        report.methods.extend(summarize_methods(&out.estimates, cell.fam0.theta(), p, cell.n, &[Method::Veb]));
        report.coverage.extend(summarize_coverage(&out.intervals, p, cell.n));
        report.absorb(out);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaRow {
    pub family: String,
    pub theta: Vec<f64>,
    pub d0: f64,
    /// Row-major `k × k`.
    pub v: Vec<f64>,
    pub kappa: Vec<f64>,
    pub v_inv_kappa: Vec<f64>,
    pub j: Vec<f64>,
    pub j_quad_form: f64,
    pub upsilon: f64,
    pub error_estimate: f64,
    pub status: String,
}

/// `V`, `κ`, `V⁻¹κ`, `J` and `υ` along a grid in one coordinate of `θ`.
pub fn run_asymptotics(cfg: &ExperimentConfig) -> Result<Vec<KappaRow>> {
    require(cfg, Experiment::Asymptotics)?;
    let fam = cfg.family()?;
    let grid = cfg.theta_grid.expect("validated").values()?;
    let d0 = 1.0 / cfg.sigma2;
    let k = fam.k();
    let rows = grid
        .par_iter()
        .map(|&x| {
            let mut theta = fam.theta().to_vec();
            theta[cfg.grid_coord] = x;
            let nan = vec![f64::NAN; k];
            let mut row = KappaRow {
                family: fam.id().name().into(),
                theta: theta.clone(),
                d0,
                v: vec![f64::NAN; k * k],
                kappa: nan.clone(),
                v_inv_kappa: nan.clone(),
                j: nan,
                j_quad_form: f64::NAN,
                upsilon: f64::NAN,
                error_estimate: f64::NAN,
                status: "ok".into(),
            };
            match fam.at(&theta).and_then(|f| bundle(&f, d0)) {
                Ok(b) => {
                    row.v = (0..k).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| b.v[(i, j)]).collect();
                    row.kappa = b.kappa.as_slice().to_vec();
                    row.v_inv_kappa = b.v_inv_kappa().map(|v| v.as_slice().to_vec()).unwrap_or(vec![f64::NAN; k]);
                    row.j = b.j.as_slice().to_vec();
                    row.j_quad_form = b.j_quad_form().unwrap_or(f64::NAN);
                    row.upsilon = b.upsilon;
                    row.error_estimate = b.error_estimate;
                }
                Err(e) => row.status = e.to_string(),
            }
            row
        })
        .collect();
    Ok(rows)
}

pub fn kappa_table(rows: &[KappaRow]) -> Table {
    let k = rows.first().map_or(1, |r| r.theta.len());
    let mut header = vec!["family".to_string()];
    header.extend(indexed("theta", k));
    header.push("d0".into());
    header.extend((1..=k).flat_map(|i| (1..=k).map(move |j| format!("v_{i}{j}"))));
    header.extend(indexed("kappa", k));
    header.extend(indexed("v_inv_kappa", k));
    header.extend(indexed("j", k));
    header.extend(["j_quad_form", "upsilon", "error_estimate", "status"].map(String::from));
    let mut t = Table::new(header);
    for r in rows {
        let mut row = vec![r.family.clone()];
        row.extend(r.theta.iter().map(|&x| num(x)));
        row.push(num(r.d0));
        for v in [&r.v, &r.kappa, &r.v_inv_kappa, &r.j] {
            row.extend(v.iter().map(|&x| num(x)));
        }
        row.extend([num(r.j_quad_form), num(r.upsilon), num(r.error_estimate), r.status.clone()]);
        t.push(row);
    }
    t
}
