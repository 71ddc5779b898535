//! vEB, method-of-moments and debiased estimators of `θ`.

use serde::{Deserialize, Serialize};

use crate::asymptotics::AsymptoticBundle;
use crate::design::TransformedData;
use crate::error::{Error, Result};
use crate::optimize::{maximize, Feasible, OptimOptions};
use crate::priors::{
    log_normalizer_with_grad, tilt_log_normalizer, tilted_nodes, FamilyId, NodeLevel, PriorFamily, TiltParams, MAX_K,
    LOCATION_GMM_VARIANCES,
};
use crate::timing::Stopwatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Veb,
    Mom,
    Debiased,
    ExactMml,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Veb => "veb",
            Method::Mom => "mom",
            Method::Debiased => "debiased",
            Method::ExactMml => "exact_mml",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub method: Method,
    pub theta_hat: Vec<f64>,
    /// vEB objective at the estimate for vEB fits; the marginal log-likelihood
    /// per coordinate for exact fits; not computed (NaN) otherwise.
    pub objective_value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub wall_time: f64,
    pub clamped: bool,
}

/// `(1/p) Σᵢ Fᵢ(θ)` with `Fᵢ(θ) = log ∫ e^{wᵢb − dᵢb²/2} dμ_θ(b)`.
pub fn veb_objective(td: &TransformedData, family: &PriorFamily, theta: &[f64]) -> Result<f64> {
    let fam = family.at(theta)?;
    let p = td.p();
    if p == 0 {
        return Err(Error::Contract("empty problem".into()));
    }
    let mut acc = 0.0;
    for i in 0..p {
        acc += tilt_log_normalizer(&fam, TiltParams::new(td.w[i], td.d[i]))?;
    }
    Ok(acc / p as f64)
}

/// `(1/p) Σᵢ E ∇ℓ(θ; B_{wᵢ,dᵢ,θ})`.
pub fn veb_objective_grad(td: &TransformedData, family: &PriorFamily, theta: &[f64]) -> Result<Vec<f64>> {
    let fam = family.at(theta)?;
    fam.require_differentiable()?;
    Ok(objective_and_grad(td, &fam)?.1)
}

fn objective_and_grad(td: &TransformedData, fam: &PriorFamily) -> Result<(f64, Vec<f64>)> {
    let p = td.p();
    let k = fam.k();
    let mut val = 0.0;
    let mut g = [0.0; MAX_K];
    for i in 0..p {
        let tp = TiltParams::new(td.w[i], td.d[i]);
        if let Some((ln, gi)) = log_normalizer_with_grad(fam, tp) {
            val += ln;
            for a in 0..k {
                g[a] += gi[a];
            }
        } else {
            let nodes = tilted_nodes(fam, tp, NodeLevel::Fine)?;
            val += nodes.log_normalizer;
            let mut gb = [0.0; MAX_K];
            for &(w, b) in &nodes.nodes {
                fam.grad_into(b, &mut gb);
                for a in 0..k {
                    g[a] += w * gb[a];
                }
            }
        }
    }
    if !val.is_finite() {
        return Err(Error::Numerical(format!("vEB objective is not finite at θ={:?}", fam.theta())));
    }
    let pf = p as f64;
    Ok((val / pf, g[..k].iter().map(|x| x / pf).collect()))
}

/// Maximize the vEB objective over the family's parameter box.
pub fn fit_veb(td: &TransformedData, family: &PriorFamily, opts: &OptimOptions) -> Result<EstimateReport> {
    let clock = Stopwatch::start();
    let region = Feasible { bounds: family.optimizer_box(), ordered: family.id().ordered() };
    let res = maximize(|theta| objective_and_grad(td, &family.at(theta)?), &region, opts)?;
    Ok(EstimateReport {
        method: Method::Veb,
        theta_hat: res.x,
        objective_value: res.value,
        iterations: res.iterations,
        converged: res.converged,
        wall_time: clock.seconds(),
        clamped: false,
    })
}

/// `β̂ = (XᵀX)⁻¹Xᵀy`, recovered from the transformed data as `(Diag(d) − A)⁻¹w`.
pub fn least_squares(td: &TransformedData) -> Result<nalgebra::DVector<f64>> {
    let chol = td
        .precision()
        .cholesky()
        .ok_or_else(|| Error::LinearAlgebra("XᵀX is singular".into()))?;
    Ok(chol.solve(&td.w))
}

/// Method of moments on the least-squares coefficients.
///
/// Empirical moments of `β̂` are matched to prior moments without correcting
/// for the noise in `β̂`; solutions are thresholded into the parameter box.
pub fn fit_mom(td: &TransformedData, family: &PriorFamily) -> Result<EstimateReport> {
    let clock = Stopwatch::start();
    let beta = least_squares(td)?;
    let p = beta.len() as f64;
    let moment = |r: i32| beta.iter().map(|b| b.powi(r)).sum::<f64>() / p;
    let (m1, m2) = (moment(1), moment(2));
    let mut clamped = false;
    let raw: Vec<f64> = match family.id() {
        FamilyId::GaussianMean | FamilyId::Bernoulli => vec![m1],
        FamilyId::SpikeSlab => {
            let m4 = moment(4);
            if m2 > 0.0 && m4 > 0.0 {
                let tau2 = m4 / (3.0 * m2);
                vec![1.0 - m2 / tau2, tau2.sqrt()]
            } else {
                clamped = true;
                vec![1.0, family.theta_box()[1][0]]
            }
        }
        FamilyId::LocationGmm => {
            let s = 2.0 * m1;
            let q = 2.0 * m2 - LOCATION_GMM_VARIANCES.iter().sum::<f64>();
            let disc = 2.0 * q - s * s;
            if disc < 0.0 {
                clamped = true;
            }
            let r = disc.max(0.0).sqrt();
            vec![0.5 * (s - r), 0.5 * (s + r)]
        }
        FamilyId::SymmetricGmm => {
            if m2 < 1.0 {
                clamped = true;
            }
            vec![(m2 - 1.0).max(0.0).sqrt()]
        }
        FamilyId::CauchyLocation => {
            return Err(Error::Config("no moment equations for the Cauchy family".into()));
        }
    };
    let mut theta = raw.clone();
    let region = Feasible { bounds: family.theta_box().to_vec(), ordered: family.id().ordered() };
    region.project(&mut theta);
    clamped |= theta.iter().zip(&raw).any(|(a, b)| a != b);
    Ok(EstimateReport {
        method: Method::Mom,
        theta_hat: theta,
        objective_value: f64::NAN,
        iterations: 0,
        converged: true,
        wall_time: clock.seconds(),
        clamped,
    })
}

/// `θ̃ = θ̂ − (p/n) V(θ̂)⁻¹ κ(θ̂)`, thresholded into the parameter box.
///
/// `asy` must be evaluated at `θ̂`.
pub fn debias(theta_hat: &[f64], family: &PriorFamily, n: usize, p: usize, asy: &AsymptoticBundle) -> Result<EstimateReport> {
    let clock = Stopwatch::start();
    if asy.theta.len() != theta_hat.len() || asy.theta.iter().zip(theta_hat).any(|(a, b)| (a - b).abs() > 1e-12) {
        return Err(Error::Contract("asymptotic bundle was not evaluated at θ̂".into()));
    }
    if n == 0 {
        return Err(Error::Config("n must be positive".into()));
    }
    let shift = asy.v_inv_kappa()?;
    if shift.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("V⁻¹κ is not finite".into()));
    }
    let ratio = p as f64 / n as f64;
    let raw: Vec<f64> = theta_hat.iter().zip(shift.iter()).map(|(t, s)| t - ratio * s).collect();
    let mut theta = raw.clone();
    let region = Feasible { bounds: family.theta_box().to_vec(), ordered: family.id().ordered() };
    region.project(&mut theta);
    Ok(EstimateReport {
        method: Method::Debiased,
        clamped: theta != raw,
        theta_hat: theta,
        objective_value: f64::NAN,
        iterations: 0,
        converged: true,
        wall_time: clock.seconds(),
    })
}
