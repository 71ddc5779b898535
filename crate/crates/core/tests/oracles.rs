//! Independent oracles for derived quantities: brute-force sums, grid
//! searches, Monte Carlo and concentration bounds.

mod common;

use std::sync::Arc;

use mfeb::asymptotics::{bundle, kl_projection};
use mfeb::design::{estimate_sigma2, gen_design, gen_instance, gen_response, transform, Design, DesignDist, TransformedData};
use mfeb::estimators::{fit_mom, fit_veb, least_squares, veb_objective_grad};
use mfeb::meanfield::{solve_fixed_point, MfOptions};
use mfeb::optimize::OptimOptions;
use mfeb::posterior_oracle::{
    elbo_gap, exact_enumerate, fit_exact_mml, gibbs_run, gibbs_sample, state_probabilities, GibbsConfig, GibbsInit,
};
use mfeb::priors::sample_prior;
use mfeb::rng::seeded;
use mfeb::PriorFamily;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn bernoulli_instance(n: usize, p: usize, pi: f64, seed: u64) -> TransformedData {
    let mut rng = seeded(seed);
    transform(&gen_instance(&PriorFamily::bernoulli(pi), n, p, 1.0, &mut rng).unwrap())
}

#[test]
fn gram_concentrates_around_identity() {
    let p = 20;
    let n = p * p;
    for seed in 0..20 {
        let x = gen_design(n, p, DesignDist::Gaussian, &mut seeded(seed)).unwrap();
        let dev = (x.tr_mul(&x) - DMatrix::identity(p, p)).norm();
        assert!(dev < 3.0 * p as f64 / (n as f64).sqrt(), "seed {seed}: {dev}");
    }
}

#[test]
fn diagonal_is_close_to_d0() {
    let (n, p) = (2000, 50);
    let bound = 5.0 * (p as f64).ln().sqrt() / (n as f64).sqrt();
    for seed in 0..20 {
        let td = bernoulli_instance(n, p, 0.5, 100 + seed);
        let worst = td.d.iter().map(|d| (d - td.d0).abs()).fold(0.0, f64::max);
        assert!(worst < bound, "seed {seed}: {worst} ≥ {bound}");
    }
}

#[test]
fn response_energy_matches_total_variance() {
    // E‖y‖²/n = σ² + (p/n)E[B²] with E[B²] = 2 for N(1, 1).
    let (n, p, reps) = (200, 50, 400);
    let fam = PriorFamily::gaussian_mean(1.0);
    let mut rng = seeded(7);
    let energy: Vec<f64> =
        (0..reps).map(|_| gen_instance(&fam, n, p, 1.0, &mut rng).unwrap().y.norm_squared() / n as f64).collect();
    let m = energy.iter().sum::<f64>() / reps as f64;
    let sd = (energy.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
    let want = 1.0 + p as f64 / n as f64 * 2.0;
    assert!((m - want).abs() < 4.0 * sd / (reps as f64).sqrt(), "{m} vs {want}");
}

#[test]
fn sigma2_estimate_concentrates() {
    let (n, p) = (10_000, 100);
    let band = 4.0 * (2.0 / (n - p) as f64).sqrt();
    let design = Arc::new(Design::new(gen_design(n, p, DesignDist::Gaussian, &mut seeded(1)).unwrap()));
    for seed in 0..20 {
        let inst = gen_response(design.clone(), &PriorFamily::bernoulli(0.5), 1.0, &mut seeded(200 + seed)).unwrap();
        let s = estimate_sigma2(&inst).unwrap();
        assert!((s - 1.0).abs() < band, "seed {seed}: {s}");
    }
}

#[test]
fn three_coordinate_posterior_by_direct_summation() {
    let td = bernoulli_instance(30, 3, 0.4, 11);
    let pi: f64 = 0.4;
    let gram = DMatrix::from_diagonal(&td.d) - &td.a;
    let mut z = 0.0;
    let mut acc = [0.0; 3];
    for s in 0..8u32 {
        let b = DVector::from_fn(3, |i, _| f64::from((s >> i) & 1));
        let k = s.count_ones() as i32;
        let weight =
            pi.powi(k) * (1.0 - pi).powi(3 - k) * (td.w.dot(&b) - 0.5 * (b.transpose() * &gram * &b)[(0, 0)]).exp();
        z += weight;
        for i in 0..3 {
            acc[i] += weight * b[i];
        }
    }
    let exact = exact_enumerate(&td, &PriorFamily::bernoulli(pi)).unwrap();
    for i in 0..3 {
        assert!((exact.summary.mean[i] - acc[i] / z).abs() < 1e-12);
    }
    let probs = state_probabilities(&td, &PriorFamily::bernoulli(pi)).unwrap();
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn gaussian_gradient_closed_form() {
    let mut rng = seeded(5);
    for _ in 0..20 {
        let td = common::random_td(12, &mut rng);
        let theta: f64 = rng.random_range(-3.0..3.0);
        let g = veb_objective_grad(&td, &PriorFamily::gaussian_mean(0.0), &[theta]).unwrap()[0];
        let want = (0..12).map(|i| (td.w[i] + theta) / (td.d[i] + 1.0) - theta).sum::<f64>() / 12.0;
        assert!((g - want).abs() < 1e-10, "{g} vs {want}");
    }
}

#[test]
fn spike_slab_moments_match_a_grid_search() {
    let fam = PriorFamily::spike_slab(0.6, 1.5);
    for seed in 0..5 {
        let mut rng = seeded(300 + seed);
        let td = transform(&gen_instance(&fam, 2000, 200, 1.0, &mut rng).unwrap());
        let b = least_squares(&td).unwrap();
        let p = b.len() as f64;
        let m2 = b.iter().map(|x| x * x).sum::<f64>() / p;
        let m4 = b.iter().map(|x| x.powi(4)).sum::<f64>() / p;
        // Moment equations with the atom mass π: E β² = (1 − π)τ², E β⁴ = 3(1 − π)τ⁴.
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=400 {
            let pi = i as f64 / 400.0;
            for j in 0..=480 {
                let tau = 0.2 + j as f64 * 0.01;
                let r = ((1.0 - pi) * tau * tau - m2).powi(2) + ((1.0 - pi) * 3.0 * tau.powi(4) - m4).powi(2);
                if r < best.0 {
                    best = (r, pi, tau);
                }
            }
        }
        let mom = fit_mom(&td, &fam).unwrap();
        assert!((mom.theta_hat[0] - best.1).abs() < 0.01, "π: {:?} vs {:?}", mom.theta_hat, best);
        assert!((mom.theta_hat[1] - best.2).abs() < 0.02, "τ: {:?} vs {:?}", mom.theta_hat, best);
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn bernoulli_v_and_j_against_monte_carlo() {
    let pi: f64 = 0.5;
    let b = bundle(&PriorFamily::bernoulli(pi), 1.0).unwrap();
    let mut rng = seeded(17);
    let n = 1_000_000;
    let (mut h, mut j) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let scale = pi * (1.0 - pi);
    for _ in 0..n {
        let beta = f64::from(rng.random::<f64>() < pi);
        let z: f64 = StandardNormal.sample(&mut rng);
        let w = beta + z;
        let m = sigmoid((pi / (1.0 - pi)).ln() + w - 0.5);
        h.push((m - pi) / scale);
        j.push(m * (1.0 - m) / scale);
    }
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let mh = mean(&h);
    let sq: Vec<f64> = h.iter().map(|x| (x - mh).powi(2)).collect();
    let v_mc = mean(&sq);
    let v_se = (sq.iter().map(|x| (x - v_mc).powi(2)).sum::<f64>() / (n * n) as f64).sqrt();
    assert!((b.v[(0, 0)] - v_mc).abs() < 4.0 * v_se, "V {} vs {v_mc} ± {v_se}", b.v[(0, 0)]);
    let j_mc = mean(&j);
    let j_se = (j.iter().map(|x| (x - j_mc).powi(2)).sum::<f64>() / (n * n) as f64).sqrt();
    assert!((b.j[0] - j_mc).abs() < 4.0 * j_se, "J {} vs {j_mc} ± {j_se}", b.j[0]);
}

#[test]
fn gaussian_upsilon_is_conjugate_variance() {
    let b = bundle(&PriorFamily::gaussian_mean(0.3), 1.0).unwrap();
    assert!((b.upsilon - 0.5).abs() < 1e-10);
    assert!((b.j[0] - 0.5).abs() < 1e-10);
}

/// `A = 0` data drawn directly from the scalar channel `W = d₀B + √d₀ Z`.
fn channel_td(mu: &PriorFamily, p: usize, seed: u64) -> TransformedData {
    let mut rng = seeded(seed);
    let b = sample_prior(mu, p, &mut rng);
    let w = DVector::from_iterator(p, b.iter().map(|x| x + Distribution::<f64>::sample(&StandardNormal, &mut rng)));
    TransformedData::from_parts(w, DVector::from_element(p, 1.0), DMatrix::zeros(p, p), 1.0).unwrap()
}

#[test]
fn misspecified_fit_approaches_the_kl_projection() {
    for mu in [PriorFamily::location_gmm(-1.0, 1.0), PriorFamily::location_gmm(-1.0, 1.5)] {
        let fit = PriorFamily::gaussian_mean(0.0);
        let star = kl_projection(&fit, &mu, 1.0, &OptimOptions::default()).unwrap().theta_star[0];
        let fits: Vec<f64> = (0..25)
            .map(|s| fit_veb(&channel_td(&mu, 2000, 900 + s), &fit, &OptimOptions::default()).unwrap().theta_hat[0])
            .collect();
        let hat = fits.iter().sum::<f64>() / fits.len() as f64;
        assert!((hat - star).abs() < 0.02, "{mu:?}: {hat} vs {star}");
    }
}

#[test]
fn gibbs_matches_enumeration() {
    let fam = PriorFamily::bernoulli(0.5);
    for seed in 0..5 {
        let td = bernoulli_instance(64, 8, 0.5, 400 + seed);
        let exact = exact_enumerate(&td, &fam).unwrap().summary;
        let post = gibbs_sample(&td, &fam, &GibbsConfig::new(20_000, GibbsInit::Naive, seed), &[]).unwrap();
        for i in 0..8 {
            let se = (post.var[i].max(1e-12) / post.ess[i]).sqrt();
            assert!((post.mean[i] - exact.mean[i]).abs() < 4.0 * se, "seed {seed}, i {i}");
        }
        let mf = solve_fixed_point(&td, &fam, &MfOptions::default()).unwrap();
        let envelope = (8.0f64 / 64.0).sqrt();
        assert!((mf.u.clone() - &exact.mean).amax() < envelope);
    }
}

#[test]
fn chain_state_frequencies_match_the_posterior() {
    let fam = PriorFamily::bernoulli(0.4);
    let td = bernoulli_instance(40, 4, 0.4, 21);
    let probs = state_probabilities(&td, &fam).unwrap();
    let mut counts = [0usize; 16];
    let mut total = 0usize;
    let cfg = GibbsConfig::new(400_000, GibbsInit::Naive, 3);
    gibbs_run(&td, &fam, &cfg, |b| {
        let s = b.iter().enumerate().fold(0usize, |s, (i, &x)| s | (usize::from(x > 0.5) << i));
        counts[s] += 1;
        total += 1;
    })
    .unwrap();
    let tv = 0.5 * counts.iter().zip(&probs).map(|(&c, &q)| (c as f64 / total as f64 - q).abs()).sum::<f64>();
    assert!(tv < 0.01, "total variation {tv}");
}

#[test]
fn chain_forgets_its_start() {
    let fam = PriorFamily::bernoulli(0.5);
    let td = bernoulli_instance(64, 8, 0.5, 31);
    let exact = exact_enumerate(&td, &fam).unwrap().summary;
    let starts = [GibbsInit::Naive, GibbsInit::AtTruth(vec![0.0; 8]), GibbsInit::AtTruth(vec![1.0; 8])];
    for (k, init) in starts.into_iter().enumerate() {
        let post = gibbs_sample(&td, &fam, &GibbsConfig::new(20_000, init, 50 + k as u64), &[]).unwrap();
        assert!((post.mean.clone() - &exact.mean).amax() < 0.03, "start {k}");
    }
}

#[test]
fn spike_slab_gibbs_and_mean_field_agree() {
    // Envelope C·√(p/n) with C = 1.
    let fam = PriorFamily::spike_slab(0.5, 1.0);
    let mut rng = seeded(61);
    let td = transform(&gen_instance(&fam, 2500, 50, 1.0, &mut rng).unwrap());
    let post = gibbs_sample(&td, &fam, &GibbsConfig::new(20_000, GibbsInit::Naive, 1), &[]).unwrap();
    let mf = solve_fixed_point(&td, &fam, &MfOptions::default()).unwrap();
    let gap = (mf.u - &post.mean).amax();
    assert!(gap < (50.0f64 / 2500.0).sqrt(), "{gap}");
}

#[test]
fn exact_mml_and_veb_get_closer_with_n() {
    let fam = PriorFamily::bernoulli(0.5);
    let median_gap = |n: usize| {
        let gaps: Vec<f64> = (0..20)
            .map(|s| {
                let td = bernoulli_instance(n, 10, 0.5, 500 + s);
                let a = fit_exact_mml(&td, &fam, 1e-4).unwrap().theta_hat[0];
                let b = fit_veb(&td, &fam, &OptimOptions::default()).unwrap().theta_hat[0];
                (a - b).abs()
            })
            .collect();
        mfeb::harness::median(&gaps)
    };
    let (small, large) = (median_gap(100), median_gap(10_000));
    assert!(large < small, "{large} ≥ {small}");
}

#[test]
fn elbo_gap_is_small_for_weak_coupling() {
    for seed in 0..20 {
        let td = bernoulli_instance(10_000, 10, 0.5, 600 + seed);
        let gap = elbo_gap(&td, &PriorFamily::bernoulli(0.5)).unwrap();
        assert!(gap.abs() < 10.0 * 10.0 / 10_000.0, "seed {seed}: {gap}");
    }
}
