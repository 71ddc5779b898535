#![allow(dead_code)]

//! Invariant checks shared by the property suite and the acceptance run.

use mfeb::asymptotics::{bundle, h_and_derivs};
use mfeb::design::TransformedData;
use mfeb::estimators::{veb_objective, veb_objective_grad};
use mfeb::priors::{tilt_expect, tilt_log_normalizer, tilt_moments, tilt_moments_quadrature};
use mfeb::{FamilyId, PriorFamily, TiltParams};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

pub type Check = Result<(), String>;

/// Interior sampling ranges used by the random checks.
pub fn interior(id: FamilyId) -> Vec<[f64; 2]> {
    match id {
        FamilyId::GaussianMean => vec![[-3.0, 3.0]],
        FamilyId::Bernoulli => vec![[0.05, 0.95]],
        FamilyId::SpikeSlab => vec![[0.05, 0.95], [0.3, 4.0]],
        FamilyId::LocationGmm => vec![[-2.0, 2.0], [-2.0, 2.0]],
        FamilyId::SymmetricGmm => vec![[0.1, 2.5]],
        FamilyId::CauchyLocation => vec![[-3.0, 3.0]],
    }
}

pub fn at_unit(id: FamilyId, u: &[f64]) -> PriorFamily {
    let theta: Vec<f64> = interior(id).iter().zip(u).map(|(b, x)| b[0] + x * (b[1] - b[0])).collect();
    PriorFamily::new(id, &theta).expect("interior point")
}

pub fn random_family<R: Rng>(id: FamilyId, rng: &mut R) -> PriorFamily {
    let u: Vec<f64> = (0..id.dim()).map(|_| rng.random::<f64>()).collect();
    at_unit(id, &u)
}

fn close(what: &str, got: f64, want: f64, tol: f64) -> Check {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{what}: {got} vs {want} (|Δ| = {:e} > {tol:e})", (got - want).abs()))
    }
}

/// `ψ′` against a central difference of the log normalizer (step 1e−5) and
/// `ψ″` against a Richardson-extrapolated second difference (steps 2e−3 and
/// 1e−3), both to 1e−6.
pub fn normalizer_moments(fam: &PriorFamily, t: f64, d: f64) -> Check {
    let ln = |t: f64| tilt_log_normalizer(fam, TiltParams::new(t, d)).map_err(|e| e.to_string());
    let m = tilt_moments(fam, TiltParams::new(t, d)).map_err(|e| e.to_string())?;
    let h1 = 1e-5;
    let fd1 = (ln(t + h1)? - ln(t - h1)?) / (2.0 * h1);
    close(&format!("{} ψ′ at t={t}, d={d}", fam.id()), m.mean, fd1, 1e-6)?;
    let l0 = ln(t)?;
    let second = |h: f64| -> Result<f64, String> { Ok((ln(t + h)? - 2.0 * l0 + ln(t - h)?) / (h * h)) };
    let fd2 = (4.0 * second(1e-3)? - second(2e-3)?) / 3.0;
    close(&format!("{} ψ″ at t={t}, d={d}", fam.id()), m.variance, fd2, 1e-6)
}

/// `E ∇ℓ = 0` to 1e−7 and `Var ∇ℓ + E ∇²ℓ = 0` to 1e−6 under the prior itself.
pub fn bartlett(fam: &PriorFamily) -> Check {
    let k = fam.k();
    let tp = TiltParams::new(0.0, 0.0);
    let g = tilt_expect(fam, tp, |b| fam.grad_loglik(b).expect("interior")).map_err(|e| e.to_string())?;
    for (a, v) in g.iter().enumerate() {
        if v.abs() > 1e-7 {
            return Err(format!("{} Bartlett 1, coordinate {a}: {v:e}", fam.id()));
        }
    }
    let m = tilt_expect(fam, tp, |b| {
        let g = fam.grad_loglik(b).expect("interior");
        let h = fam.hess_loglik(b).expect("interior");
        let mut out = Vec::with_capacity(k * k);
        for a in 0..k {
            for c in 0..k {
                out.push(g[a] * g[c] + h[(a, c)]);
            }
        }
        out
    })
    .map_err(|e| e.to_string())?;
    let mut fro = 0.0;
    for a in 0..k {
        for c in 0..k {
            fro += (m[a * k + c] - g[a] * g[c]).powi(2);
        }
    }
    if fro.sqrt() > 1e-6 {
        return Err(format!("{} Bartlett 2: ‖Var ∇ℓ + E∇²ℓ‖ = {:e}", fam.id(), fro.sqrt()));
    }
    Ok(())
}

/// Closed-form tilt moments against generic quadrature to 1e−8.
pub fn closed_form_vs_quadrature(fam: &PriorFamily, t: f64, d: f64) -> Check {
    let tp = TiltParams::new(t, d);
    let a = tilt_moments(fam, tp).map_err(|e| e.to_string())?;
    let b = tilt_moments_quadrature(fam, tp).map_err(|e| e.to_string())?;
    let tag = format!("{} at t={t}, d={d}", fam.id());
    close(&format!("{tag} log normalizer"), a.log_normalizer, b.log_normalizer, 1e-8)?;
    close(&format!("{tag} mean"), a.mean, b.mean, 1e-8)?;
    close(&format!("{tag} variance"), a.variance, b.variance, 1e-8)
}

/// Small random transformed-data instance with independent columns.
pub fn random_td<R: Rng>(p: usize, rng: &mut R) -> TransformedData {
    let w = DVector::from_fn(p, |_, _| rng.random_range(-3.0..3.0));
    let d = DVector::from_fn(p, |_, _| rng.random_range(0.5..2.0));
    TransformedData::from_parts(w, d, DMatrix::zeros(p, p), 1.0).expect("valid")
}

/// Gradient of the vEB objective against central differences (step 1e−6) to 1e−6.
pub fn objective_gradient(td: &TransformedData, fam: &PriorFamily) -> Check {
    let theta = fam.theta().to_vec();
    let g = veb_objective_grad(td, fam, &theta).map_err(|e| e.to_string())?;
    let h = 1e-6;
    for a in 0..fam.k() {
        let mut up = theta.clone();
        let mut dn = theta.clone();
        up[a] += h;
        dn[a] -= h;
        let fd = (veb_objective(td, fam, &up).map_err(|e| e.to_string())? - veb_objective(td, fam, &dn).map_err(|e| e.to_string())?)
            / (2.0 * h);
        close(&format!("{} ∂F/∂θ{a} at {theta:?}", fam.id()), g[a], fd, 1e-6)?;
    }
    Ok(())
}

/// `h′` and `h″` against central differences of `h` in `t` (step 1e−4) to 1e−5.
pub fn h_derivatives(fam: &PriorFamily, t: f64, d0: f64) -> Check {
    let at = |t: f64| h_and_derivs(fam, t, d0).map_err(|e| e.to_string());
    let (c, up, dn) = (at(t)?, at(t + 1e-4)?, at(t - 1e-4)?);
    let s = 1e-4;
    for a in 0..fam.k() {
        let fd1 = (up.h[a] - dn.h[a]) / (2.0 * s);
        let fd2 = (up.h[a] - 2.0 * c.h[a] + dn.h[a]) / (s * s);
        close(&format!("{} h′ at t={t}", fam.id()), c.h1[a], fd1, 1e-5)?;
        close(&format!("{} h″ at t={t}", fam.id()), c.h2[a], fd2, 1e-5)?;
    }
    Ok(())
}

/// `∂_θ E(B_{t,d₀,θ}) = Cov(B, ∇ℓ)` against central differences in `θ` (step 1e−5) to 1e−5.
pub fn jacobian_integrand(fam: &PriorFamily, t: f64, d0: f64) -> Check {
    let c = h_and_derivs(fam, t, d0).map_err(|e| e.to_string())?;
    let theta = fam.theta().to_vec();
    let step = 1e-5;
    let mean_at = |th: &[f64]| -> Result<f64, String> {
        let f = fam.at(th).map_err(|e| e.to_string())?;
        Ok(tilt_moments(&f, TiltParams::new(t, d0)).map_err(|e| e.to_string())?.mean)
    };
    for a in 0..fam.k() {
        let mut up = theta.clone();
        let mut dn = theta.clone();
        up[a] += step;
        dn[a] -= step;
        let fd = (mean_at(&up)? - mean_at(&dn)?) / (2.0 * step);
        close(&format!("{} ∂E(B)/∂θ{a} at t={t}", fam.id()), c.h1[a], fd, 1e-5)?;
    }
    Ok(())
}

/// `I(θ) − V(θ)` positive definite.
pub fn loewner(fam: &PriorFamily, d0: f64) -> Check {
    let b = bundle(fam, d0).map_err(|e| e.to_string())?;
    let diff = &b.fisher - &b.v;
    let eig = SymmetricEigen::new((&diff + diff.transpose()) * 0.5);
    let min = eig.eigenvalues.min();
    let v_min = SymmetricEigen::new(b.v.clone()).eigenvalues.min();
    if min > 0.0 && v_min > 0.0 {
        Ok(())
    } else {
        Err(format!("{} at {:?}: λmin(I − V) = {min:e}, λmin(V) = {v_min:e}", fam.id(), fam.theta()))
    }
}
