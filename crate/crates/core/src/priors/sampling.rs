use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tilt::{tilted_mixture, TiltParams};
use super::{Mixture, PriorFamily};
use crate::error::{Error, Result};

const MAX_REJECTIONS: usize = 10_000_000;

fn draw_mixture<R: Rng + ?Sized>(mix: &Mixture, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut chosen = mix.last().expect("empty mixture");
    for c in mix {
        acc += c.log_weight.exp();
        if u < acc {
            chosen = c;
            break;
        }
    }
    if chosen.var == 0.0 {
        chosen.mean
    } else {
        let z: f64 = StandardNormal.sample(rng);
        chosen.mean + chosen.var.sqrt() * z
    }
}

/// One exact draw from `B_{t,d,θ}`.
///
/// Mixture families pick a tilted component and draw from it. The Cauchy
/// family is sampled by rejection from its Gaussian envelope `N(t/d, 1/d)`,
/// accepting with probability `1/(1 + (b − θ)²)`.
pub fn sample_tilted<R: Rng + ?Sized>(fam: &PriorFamily, tp: TiltParams, rng: &mut R) -> Result<f64> {
    tp.validate(fam)?;
    if fam.has_closed_form() {
        let (mix, ln) = tilted_mixture(fam, tp);
        if !ln.is_finite() {
            return Err(Error::Numerical(format!("cannot sample a tilt with normalizer {ln}")));
        }
        return Ok(draw_mixture(&mix, rng));
    }
    let theta = fam.theta()[0];
    let (c, sd) = (tp.t / tp.d, tp.d.recip().sqrt());
    for _ in 0..MAX_REJECTIONS {
        let z: f64 = StandardNormal.sample(rng);
        let b = c + sd * z;
        let u: f64 = rng.random();
        if u * (1.0 + (b - theta).powi(2)) < 1.0 {
            return Ok(b);
        }
    }
    Err(Error::Numerical(format!(
        "Cauchy tilt sampler exceeded {MAX_REJECTIONS} proposals at t={}, d={}",
        tp.t, tp.d
    )))
}

/// `n` i.i.d. draws from `μ_θ`.
pub fn sample_prior<R: Rng + ?Sized>(fam: &PriorFamily, n: usize, rng: &mut R) -> Vec<f64> {
    if fam.has_closed_form() {
        let mix = fam.mixture().into_iter().filter(|c| c.log_weight > f64::NEG_INFINITY).collect();
        (0..n).map(|_| draw_mixture(&mix, rng)).collect()
    } else {
        let theta = fam.theta()[0];
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                theta + (PI * (u - 0.5)).tan()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::tilt_moments;
    use crate::rng::seeded;

    fn mean_and_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    #[test]
    fn degenerate_bernoulli() {
        let mut rng = seeded(1);
        for _ in 0..100 {
            assert_eq!(sample_tilted(&PriorFamily::bernoulli(1.0), TiltParams::new(-3.0, 2.0), &mut rng).unwrap(), 1.0);
        }
    }

    #[test]
    fn spike_slab_tilted_mean() {
        let fam = PriorFamily::spike_slab(0.5, 1.0);
        let tp = TiltParams::new(2.0, 1.0);
        let mut rng = seeded(2);
        let xs: Vec<f64> = (0..1_000_000).map(|_| sample_tilted(&fam, tp, &mut rng).unwrap()).collect();
        let (m, v) = mean_and_var(&xs);
        let exact = tilt_moments(&fam, tp).unwrap();
        let se = (v / xs.len() as f64).sqrt();
        assert!((m - exact.mean).abs() < 4.0 * se, "{m} vs {}", exact.mean);
    }

    #[test]
    fn location_gmm_tilted_variance() {
        let fam = PriorFamily::location_gmm(-1.0, 1.0);
        let tp = TiltParams::new(0.5, 1.0);
        let mut rng = seeded(3);
        let xs: Vec<f64> = (0..1_000_000).map(|_| sample_tilted(&fam, tp, &mut rng).unwrap()).collect();
        let (m, v) = mean_and_var(&xs);
        let exact = tilt_moments(&fam, tp).unwrap();
        let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / xs.len() as f64;
        let se = ((m4 - v * v) / xs.len() as f64).sqrt();
        assert!((v - exact.variance).abs() < 4.0 * se, "{v} vs {}", exact.variance);
    }

    #[test]
    fn cauchy_tilted_draws_match_quadrature_mean() {
        let fam = PriorFamily::cauchy_location(0.5);
        let tp = TiltParams::new(1.0, 1.0);
        let mut rng = seeded(4);
        let xs: Vec<f64> = (0..200_000).map(|_| sample_tilted(&fam, tp, &mut rng).unwrap()).collect();
        let (m, v) = mean_and_var(&xs);
        let exact = tilt_moments(&fam, tp).unwrap();
        assert!((m - exact.mean).abs() < 4.0 * (v / xs.len() as f64).sqrt());
    }

    #[test]
    fn prior_draws() {
        let mut rng = seeded(5);
        let n = 1_000_000;
        let ber = sample_prior(&PriorFamily::bernoulli(0.5), n, &mut rng);
        assert!((ber.iter().sum::<f64>() / n as f64 - 0.5).abs() < 0.002);
        let gmm = sample_prior(&PriorFamily::location_gmm(-1.0, 1.0), n, &mut rng);
        let (m, v) = mean_and_var(&gmm);
        assert!(m.abs() < 4.0 * (v / n as f64).sqrt());
        let mut cauchy = sample_prior(&PriorFamily::cauchy_location(0.0), 100_001, &mut rng);
        cauchy.sort_by(f64::total_cmp);
        // Median of n Cauchy draws has sd ≈ π/(2√n).
        assert!(cauchy[50_000].abs() < 4.0 * PI / (2.0 * 100_001f64.sqrt()));
    }
}
