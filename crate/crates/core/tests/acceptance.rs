//! End-to-end acceptance run. Prints one line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use mfeb::asymptotics::{kappa, v_matrix};
use mfeb::design::{gen_instance, transform};
use mfeb::estimators::{fit_veb, Method};
use mfeb::harness::{run_coverage, run_debias, run_mse, ExperimentConfig, Experiment, NRule};
use mfeb::inference::CiKind;
use mfeb::meanfield::{solve_fixed_point, MfOptions};
use mfeb::optimize::OptimOptions;
use mfeb::posterior_oracle::{elbo_gap, exact_enumerate, fit_exact_mml, gibbs_sample, GibbsConfig, GibbsInit};
use mfeb::rng::seeded;
use mfeb::{FamilyId, PriorFamily};
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

type Verdict = Result<String, String>;

fn config(experiment: Experiment, fam: &PriorFamily, p_grid: &[usize], replicates: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(experiment, fam.spec());
    cfg.p_grid = p_grid.to_vec();
    cfg.replicates = replicates;
    cfg.master_seed = 0;
    cfg
}

fn elapsed(start: Instant) -> String {
    format!("{:.1} s", start.elapsed().as_secs_f64())
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn c1_gaussian_closed_form() -> Verdict {
    let start = Instant::now();
    let mut rng = seeded(101);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let p = rng.random_range(5..60);
        let n = rng.random_range(p..4 * p + 10);
        let theta0 = rng.random_range(-3.0..3.0);
        let inst = gen_instance(&PriorFamily::gaussian_mean(theta0), n, p, 1.0, &mut rng).map_err(err)?;
        let td = transform(&inst);
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..p {
            num += td.w[i] / (td.d[i] + 1.0);
            den += td.d[i] / (td.d[i] + 1.0);
        }
        let fit = fit_veb(&td, &PriorFamily::gaussian_mean(0.0), &OptimOptions::default()).map_err(err)?;
        worst = worst.max((fit.theta_hat[0] - num / den).abs());
    }
    let t = start.elapsed();
    let detail = format!("max |θ̂ − closed form| = {worst:.2e} over 50 instances in {:.3} s", t.as_secs_f64());
    if worst <= 1e-8 && t < Duration::from_secs(1) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c2_gaussian_v() -> Verdict {
    let fam = PriorFamily::gaussian_mean(0.7);
    let mut parts = Vec::new();
    let mut ok = true;
    for sigma2 in [0.5, 1.0, 2.0] {
        let d0 = 1.0 / sigma2;
        let v = v_matrix(&fam, d0).map_err(err)?[(0, 0)];
        let k = kappa(&fam, d0).map_err(err)?[0];
        let want = 1.0 / (1.0 + sigma2);
        ok &= (v - want).abs() <= 1e-6 && k.abs() <= 1e-8;
        parts.push(format!("σ²={sigma2}: V={v:.8} (want {want:.8}), κ={k:.1e}"));
    }
    if ok {
        Ok(parts.join("; "))
    } else {
        Err(parts.join("; "))
    }
}

fn c3_bernoulli_mse() -> Verdict {
    let start = Instant::now();
    let fam = PriorFamily::bernoulli(0.5);
    let cfg = config(Experiment::Mse, &fam, &[25, 50, 100], 200);
    let report = run_mse(&cfg).map_err(err)?;
    let mut ok = report.failures.is_empty();
    let mut parts = Vec::new();
    for (p, reference) in [(25, 0.042), (50, 0.023), (100, 0.011)] {
        let mse = report.method(p, Method::Veb).ok_or("missing summary")?.mse;
        ok &= (mse - reference).abs() <= 0.35 * reference;
        parts.push(format!("p={p}: {mse:.4} (ref {reference})"));
    }
    ok &= start.elapsed() < Duration::from_secs(600);
    let detail = format!("{}; {} failures; {}", parts.join(", "), report.failures.len(), elapsed(start));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Kolmogorov–Smirnov distance of standardized values from `N(0, 1)`.
fn ks_distance(z: &[f64]) -> f64 {
    let normal = Normal::standard();
    let mut s = z.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal.cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

fn c4_limiting_variance() -> Verdict {
    let start = Instant::now();
    let fam = PriorFamily::bernoulli(0.5);
    let cfg = config(Experiment::Mse, &fam, &[100], 400);
    let report = run_mse(&cfg).map_err(err)?;
    let x: Vec<f64> = report.estimates.iter().map(|r| 10.0 * (r.theta_hat[0] - 0.5)).collect();
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let target = 1.0 / v_matrix(&fam, 1.0).map_err(err)?[(0, 0)];
    let sd = var.sqrt();
    let z: Vec<f64> = x.iter().map(|v| (v - mean) / sd).collect();
    let d = ks_distance(&z);
    let critical = 1.628 / n.sqrt();
    let detail = format!(
        "Var √p(θ̂−θ₀) = {var:.4} vs V⁻¹ = {target:.4} (ratio {:.3}); KS D = {d:.4} (1% critical {critical:.4}, n = {}); {}",
        var / target,
        x.len(),
        elapsed(start)
    );
    if x.len() == 400 && (var / target - 1.0).abs() <= 0.2 && d < critical {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c5_coverage() -> Verdict {
    let start = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for fam in [PriorFamily::bernoulli(0.5), PriorFamily::location_gmm(-1.0, 1.0)] {
        let mut cfg = config(Experiment::Coverage, &fam, &[100], 200);
        cfg.n_rule = NRule::Fixed(10_000);
        let report = run_coverage(&cfg).map_err(err)?;
        ok &= report.failures.is_empty();
        for label in ["avg", "contrast"] {
            let oracle = report.coverage_for(100, label, CiKind::Oracle).ok_or("missing oracle row")?;
            let adj = report.coverage_for(100, label, CiKind::AdjustedEb).ok_or("missing adjusted row")?;
            ok &= (0.86..=0.94).contains(&oracle.cond_coverage);
            ok &= (0.82..=0.96).contains(&adj.coverage);
            let mut line = format!(
                "{} {label}: oracle {:.3} (w {:.3}), adjusted {:.3} (w {:.3})",
                fam.id(),
                oracle.cond_coverage,
                oracle.width_mean,
                adj.coverage,
                adj.width_mean
            );
            if fam.id() == FamilyId::Bernoulli {
                let within = |w: f64, r: f64| (w - r).abs() <= 0.1 * r;
                ok &= within(oracle.width_mean, 1.47);
                ok &= within(adj.width_mean, if label == "avg" { 3.22 } else { 1.44 });
            }
            line.push_str(&format!(" [{} failures]", report.failures.len()));
            parts.push(line);
        }
    }
    ok &= start.elapsed() < Duration::from_secs(3600);
    let detail = format!("{}; {}", parts.join("; "), elapsed(start));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c6_debias() -> Verdict {
    let start = Instant::now();
    let fam = PriorFamily::symmetric_gmm(1.0);
    let mut cfg = config(Experiment::Debias, &fam, &[31, 100], 400);
    cfg.n_rule = NRule::Fixed(1000);
    cfg.estimators = vec![Method::Veb, Method::Debiased];
    let report = run_debias(&cfg).map_err(err)?;
    let bias = |p: usize, m: Method| report.method(p, m).map(|s| s.bias[0].abs()).ok_or("missing summary");
    let (b31, b100, d100) = (bias(31, Method::Veb)?, bias(100, Method::Veb)?, bias(100, Method::Debiased)?);
    let detail = format!(
        "|bias θ̂|: p=31 {b31:.4}, p=100 {b100:.4}; |bias θ̃| p=100 {d100:.4} (ratio {:.2}); {} failures; {}",
        b100 / d100,
        report.failures.len(),
        elapsed(start)
    );
    if b100 > b31 && b100 >= 2.0 * d100 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c7_oracle_equivalence() -> Verdict {
    let fam = PriorFamily::bernoulli(0.5);
    let (mut worst_z, mut worst_mf) = (0.0f64, 0.0f64);
    for seed in 0..20u64 {
        let mut rng = seeded(7000 + seed);
        let inst = gen_instance(&fam, 100, 8, 1.0, &mut rng).map_err(err)?;
        let td = transform(&inst);
        let exact = exact_enumerate(&td, &fam).map_err(err)?.summary;
        let cfg = GibbsConfig::new(40_000, GibbsInit::Naive, seed);
        let gibbs = gibbs_sample(&td, &fam, &cfg, &[]).map_err(err)?;
        let mf = solve_fixed_point(&td, &fam, &MfOptions::default()).map_err(err)?;
        for i in 0..8 {
            let se = (gibbs.var[i].max(1e-12) / gibbs.ess[i]).sqrt();
            worst_z = worst_z.max((gibbs.mean[i] - exact.mean[i]).abs() / se);
            worst_mf = worst_mf.max((mf.u[i] - exact.mean[i]).abs());
        }
    }
    let detail = format!("max |Gibbs − exact| = {worst_z:.2} MC SE; max |u − exact| = {worst_mf:.4} over 20 seeds");
    if worst_z <= 4.0 && worst_mf <= 0.05 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c8_elbo() -> Verdict {
    let mut rng = seeded(8000);
    let mut worst_gap = 0.0f64;
    for _ in 0..20 {
        let td = random_td(10, &mut rng);
        let fam = PriorFamily::bernoulli(rng.random_range(0.05..0.95));
        worst_gap = worst_gap.max(elbo_gap(&td, &fam).map_err(err)?.abs());
    }
    let fam = PriorFamily::bernoulli(0.5);
    let mut diffs = Vec::new();
    for seed in 0..20u64 {
        let mut rng = seeded(8100 + seed);
        let td = transform(&gen_instance(&fam, 10_000, 10, 1.0, &mut rng).map_err(err)?);
        let mml = fit_exact_mml(&td, &fam, 1e-4).map_err(err)?.theta_hat[0];
        let veb = fit_veb(&td, &fam, &OptimOptions::default()).map_err(err)?.theta_hat[0];
        diffs.push((mml - veb).abs());
    }
    let med = mfeb::harness::median(&diffs);
    let detail = format!("max |ELBO gap| at A=0 = {worst_gap:.2e}; median |MML − vEB| = {med:.4}");
    if worst_gap <= 1e-10 && med < 0.02 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c9_properties() -> Verdict {
    let start = Instant::now();
    let mut rng = seeded(9000);
    let mut checks = 0usize;
    let mut failures = Vec::new();
    let mut record = |r: Check| {
        checks += 1;
        if let Err(e) = r {
            failures.push(e);
        }
    };
    for id in FamilyId::ALL {
        let smooth = id != FamilyId::CauchyLocation;
        for _ in 0..10 {
            let fam = random_family(id, &mut rng);
            let t = rng.random_range(-5.0..5.0);
            let d = rng.random_range(0.2..3.0);
            record(normalizer_moments(&fam, t, d));
            record(h_derivatives(&fam, t, 1.0));
            record(jacobian_integrand(&fam, t, 1.0));
            record(objective_gradient(&random_td(5, &mut rng), &fam));
            if smooth {
                record(closed_form_vs_quadrature(&fam, t, d));
                record(bartlett(&fam));
            }
        }
        for _ in 0..3 {
            record(loewner(&random_family(id, &mut rng), 1.0));
        }
    }
    let t = start.elapsed();
    let detail = format!("{checks} checks, {} failed, {:.1} s", failures.len(), t.as_secs_f64());
    if failures.is_empty() && t < Duration::from_secs(120) {
        Ok(detail)
    } else {
        Err(format!("{detail}: {}", failures.join(" | ")))
    }
}

fn main() -> ExitCode {
    let criteria: [(u32, fn() -> Verdict); 9] = [
        (1, c1_gaussian_closed_form),
        (2, c2_gaussian_v),
        (3, c3_bernoulli_mse),
        (4, c4_limiting_variance),
        (5, c5_coverage),
        (6, c6_debias),
        (7, c7_oracle_equivalence),
        (8, c8_elbo),
        (9, c9_properties),
    ];
    let only: Vec<u32> = std::env::var("ACCEPTANCE_ONLY")
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (id, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        match run() {
            Ok(detail) => println!("criterion {id}: PASS - {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id}: FAIL - {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
