//! Limiting quantities of the vEB estimator and of mean-field credible intervals.
//!
//! Everything is an expectation over the pair `(B, W)` with `B ~ μ_θ` and
//! `W | B ~ N(d₀B, d₀)`. The conditional law of `B` given `W = t` is the tilt
//! `B_{t,d₀,θ}`, so each quantity is an outer integral over `W` of moments of
//! a tilt. For mixture priors the law of `W` is itself a Gaussian mixture and
//! the outer integral uses composite Gauss–Legendre panels per component; the Cauchy
//! family falls back to seeded Monte Carlo over `W`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimize::{maximize_bfgs, Feasible, OptimOptions};
use crate::priors::{
    log_normalizer_with_grad, node_scheme, sample_prior, tilted_nodes, FamilyId, NodeLevel, PriorFamily, Scheme,
    TiltParams, MAX_K,
};
use crate::quadrature::{gauss_legendre, normal_nodes_composite};
use crate::rng::seeded;

/// Outer Gauss–Legendre nodes per panel for each mixture component of `W`.
pub const OUTER_NODES: usize = 16;
const OUTER_NODES_COARSE: usize = 12;
/// Largest outer panel width, in units of `t`.
const OUTER_PANEL: f64 = 2.0;
/// Tolerance on the agreement of the two expressions for `V`.
pub const V_FORMS_TOL: f64 = 1e-4;
/// Default number of `(B, W)` draws for the Monte Carlo scheme.
pub const DEFAULT_MC_SAMPLES: usize = 20_000;
const DEFAULT_MC_SEED: u64 = 0x5EED_A5F7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterScheme {
    PriorQuadrature { nodes: usize },
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemeInfo {
    pub outer: OuterScheme,
    pub inner: Scheme,
}

/// `I(θ)`, `V(θ)`, `κ(θ)`, `J(θ)` and `υ(θ)` at one `(θ, d₀)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AsymptoticBundle {
    pub family: FamilyId,
    pub theta: Vec<f64>,
    pub d0: f64,
    pub fisher: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub kappa: DVector<f64>,
    pub j: DVector<f64>,
    pub upsilon: f64,
    /// `E[B²]` under the prior; infinite for the Cauchy family, where `κ` is undefined.
    pub second_moment: f64,
    pub scheme: SchemeInfo,
    /// Largest discrepancy between refinement levels and between the two forms of `V`
    /// (quadrature), or largest Monte Carlo standard error (Monte Carlo).
    pub error_estimate: f64,
}

impl AsymptoticBundle {
    pub fn k(&self) -> usize {
        self.theta.len()
    }

    /// `V⁻¹κ`.
    pub fn v_inv_kappa(&self) -> Result<DVector<f64>> {
        let chol = self.v.clone().cholesky().ok_or_else(|| singular_v(&self.theta))?;
        Ok(chol.solve(&self.kappa))
    }

    /// `JᵀV⁻¹J`.
    pub fn j_quad_form(&self) -> Result<f64> {
        let chol = self.v.clone().cholesky().ok_or_else(|| singular_v(&self.theta))?;
        Ok(self.j.dot(&chol.solve(&self.j)))
    }

    /// `V⁻¹`, the limiting covariance of `√p(θ̂ − θ₀)`.
    pub fn v_inverse(&self) -> Result<DMatrix<f64>> {
        let chol = self.v.clone().cholesky().ok_or_else(|| singular_v(&self.theta))?;
        Ok(chol.inverse())
    }
}

fn singular_v(theta: &[f64]) -> Error {
    Error::Numerical(format!("V(θ) is singular at θ={theta:?}"))
}

/// Monte Carlo standard errors of the bundle entries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McErrors {
    pub v: DMatrix<f64>,
    pub kappa: DVector<f64>,
    pub j: DVector<f64>,
    pub upsilon: f64,
}

/// Moments of `B_{t,d₀,θ}` and of the score under it.
#[derive(Debug, Clone, Copy, Default)]
pub struct InnerMoments {
    pub mean_b: f64,
    pub var_b: f64,
    /// `h(t) = E ∇ℓ`.
    pub h: [f64; MAX_K],
    /// `E[∇ℓ∇ℓᵀ]`.
    pub e_gg: [[f64; MAX_K]; MAX_K],
    /// `h′(t) = Cov(B, ∇ℓ)`.
    pub cov_bg: [f64; MAX_K],
    /// `h″(t)`, the joint cumulant of `(∇ℓ, B, B)`.
    pub h2: [f64; MAX_K],
}

/// Moments of the tilt at `(t, d)` under `fam`'s `θ`.
pub fn inner_moments(fam: &PriorFamily, t: f64, d: f64, level: NodeLevel) -> Result<InnerMoments> {
    let nodes = tilted_nodes(fam, TiltParams::new(t, d), level)?;
    Ok(moments_from_nodes(fam, &nodes.nodes))
}

fn moments_from_nodes(fam: &PriorFamily, nodes: &[(f64, f64)]) -> InnerMoments {
    let k = fam.k();
    let mut m = InnerMoments::default();
    let mut grads = Vec::with_capacity(nodes.len());
    for &(w, b) in nodes {
        let mut g = [0.0; MAX_K];
        fam.grad_into(b, &mut g);
        m.mean_b += w * b;
        for a in 0..k {
            m.h[a] += w * g[a];
        }
        grads.push(g);
    }
    for (&(w, b), g) in nodes.iter().zip(&grads) {
        let db = b - m.mean_b;
        m.var_b += w * db * db;
        for a in 0..k {
            let dg = g[a] - m.h[a];
            m.cov_bg[a] += w * db * dg;
            m.h2[a] += w * dg * db * db;
            for c in 0..k {
                m.e_gg[a][c] += w * g[a] * g[c];
            }
        }
    }
    m
}

/// Probability nodes `(weight, t)` for the law of `W`.
fn outer_nodes(fam: &PriorFamily, d0: f64, n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for c in fam.mixture() {
        let w = c.log_weight.exp();
        if w == 0.0 {
            continue;
        }
        let var = d0 * d0 * c.var + d0;
        out.extend(normal_nodes_composite(d0 * c.mean, var, n, OUTER_PANEL).into_iter().map(|(gw, t)| (w * gw, t)));
    }
    out
}

/// Probability nodes for `μ_θ` itself, used for prior expectations of the score.
fn prior_nodes(fam: &PriorFamily, level: NodeLevel) -> Result<Vec<(f64, f64)>> {
    if fam.has_closed_form() {
        return Ok(tilted_nodes(fam, TiltParams::new(0.0, 0.0), level)?.nodes);
    }
    // Cauchy: b = θ + tan φ with φ uniform on (−π/2, π/2).
    let theta = fam.theta()[0];
    let per_panel = if level == NodeLevel::Fine { 16 } else { 12 };
    let rule = gauss_legendre(per_panel);
    let panels = 16;
    let h = PI / panels as f64;
    let mut out = Vec::with_capacity(panels * per_panel);
    for j in 0..panels {
        let mid = -PI / 2.0 + (j as f64 + 0.5) * h;
        for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
            out.push((0.5 * h * w / PI, theta + (mid + 0.5 * h * x).tan()));
        }
    }
    Ok(out)
}

fn check_d0(d0: f64) -> Result<()> {
    if d0 > 0.0 && d0.is_finite() {
        Ok(())
    } else {
        Err(Error::Contract(format!("d₀ must be positive, got {d0}")))
    }
}

/// `I(θ) = Var ∇ℓ(θ; B)`, `B ~ μ_θ`.
pub fn fisher_prior(fam: &PriorFamily) -> Result<DMatrix<f64>> {
    fam.require_differentiable()?;
    let k = fam.k();
    let nodes = prior_nodes(fam, NodeLevel::Fine)?;
    let m = moments_from_nodes(fam, &nodes);
    Ok(DMatrix::from_fn(k, k, |a, c| m.e_gg[a][c] - m.h[a] * m.h[c]))
}

/// `h(t)`, `h′(t)` and `h″(t)` at `d = d₀`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HDerivs {
    pub h: Vec<f64>,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
}

pub fn h_and_derivs(fam: &PriorFamily, t: f64, d0: f64) -> Result<HDerivs> {
    fam.require_differentiable()?;
    let k = fam.k();
    let m = inner_moments(fam, t, d0, NodeLevel::Fine)?;
    Ok(HDerivs { h: m.h[..k].to_vec(), h1: m.cov_bg[..k].to_vec(), h2: m.h2[..k].to_vec() })
}

/// Outer expectations accumulated over the law of `W`.
#[derive(Debug, Clone, Copy, Default)]
struct Outer {
    e_h: [f64; MAX_K],
    e_hh: [[f64; MAX_K]; MAX_K],
    e_cond_gg: [[f64; MAX_K]; MAX_K],
    e_h2: [f64; MAX_K],
    e_j: [f64; MAX_K],
    e_var_b: f64,
}

fn outer_quadrature(fam: &PriorFamily, d0: f64, outer_n: usize, level: NodeLevel) -> Result<Outer> {
    let k = fam.k();
    let mut o = Outer::default();
    for (w, t) in outer_nodes(fam, d0, outer_n) {
        let m = inner_moments(fam, t, d0, level)?;
        accumulate(&mut o, &m, w, k);
    }
    Ok(o)
}

fn accumulate(o: &mut Outer, m: &InnerMoments, w: f64, k: usize) {
    o.e_var_b += w * m.var_b;
    for a in 0..k {
        o.e_h[a] += w * m.h[a];
        o.e_h2[a] += w * m.h2[a];
        o.e_j[a] += w * m.cov_bg[a];
        for c in 0..k {
            o.e_hh[a][c] += w * m.h[a] * m.h[c];
            o.e_cond_gg[a][c] += w * m.e_gg[a][c];
        }
    }
}

struct Assembled {
    v: DMatrix<f64>,
    v_alt: DMatrix<f64>,
    kappa: DVector<f64>,
    j: DVector<f64>,
    upsilon: f64,
}

fn assemble(o: &Outer, fisher: &DMatrix<f64>, second_moment: f64, k: usize) -> Assembled {
    // V = Var[E(∇ℓ | W)], and equivalently I − E[Var(∇ℓ | W)].
    let v = DMatrix::from_fn(k, k, |a, c| o.e_hh[a][c] - o.e_h[a] * o.e_h[c]);
    let v_alt = DMatrix::from_fn(k, k, |a, c| fisher[(a, c)] - (o.e_cond_gg[a][c] - o.e_hh[a][c]));
    let kappa = DVector::from_fn(k, |a, _| 0.5 * second_moment * o.e_h2[a]);
    let j = DVector::from_fn(k, |a, _| o.e_j[a]);
    Assembled { v, v_alt, kappa, j, upsilon: o.e_var_b }
}

fn max_abs_diff(a: &Assembled, b: &Assembled) -> f64 {
    let mut m = (a.upsilon - b.upsilon).abs();
    for (x, y) in a.v.iter().zip(b.v.iter()) {
        m = m.max((x - y).abs());
    }
    for (x, y) in a.kappa.iter().zip(b.kappa.iter()) {
        m = m.max((x - y).abs());
    }
    for (x, y) in a.j.iter().zip(b.j.iter()) {
        m = m.max((x - y).abs());
    }
    m
}

/// All limiting quantities at `fam`'s `θ`.
///
/// Mixture priors use nested quadrature; the Cauchy family uses Monte Carlo
/// over `W` with a fixed seed.
pub fn bundle(fam: &PriorFamily, d0: f64) -> Result<AsymptoticBundle> {
    check_d0(d0)?;
    fam.require_differentiable()?;
    if !fam.has_closed_form() {
        return Ok(bundle_monte_carlo(fam, d0, DEFAULT_MC_SAMPLES, DEFAULT_MC_SEED)?.0);
    }
    let k = fam.k();
    let fisher = fisher_prior(fam)?;
    let m2 = fam.second_moment();
    let fine = assemble(&outer_quadrature(fam, d0, OUTER_NODES, NodeLevel::Fine)?, &fisher, m2, k);
    let coarse = assemble(&outer_quadrature(fam, d0, OUTER_NODES_COARSE, NodeLevel::Coarse)?, &fisher, m2, k);
    let forms_gap = (&fine.v - &fine.v_alt).abs().max();
    if !(forms_gap <= V_FORMS_TOL) {
        return Err(Error::Numerical(format!(
            "the two forms of V disagree by {forms_gap:e} at θ={:?}",
            fam.theta()
        )));
    }
    let error_estimate = max_abs_diff(&fine, &coarse).max(forms_gap);
    Ok(AsymptoticBundle {
        family: fam.id(),
        theta: fam.theta().to_vec(),
        d0,
        fisher,
        v: symmetrize(fine.v),
        // The score is affine in b for the Gaussian location family, so h″ ≡ 0.
        kappa: if fam.id() == FamilyId::GaussianMean { DVector::zeros(k) } else { fine.kappa },
        j: fine.j,
        upsilon: fine.upsilon,
        second_moment: m2,
        scheme: SchemeInfo { outer: OuterScheme::PriorQuadrature { nodes: OUTER_NODES }, inner: node_scheme(fam) },
        error_estimate,
    })
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Monte Carlo over `(B, W)` pairs with tilt moments computed exactly at each `W`.
pub fn bundle_monte_carlo(fam: &PriorFamily, d0: f64, samples: usize, seed: u64) -> Result<(AsymptoticBundle, McErrors)> {
    check_d0(d0)?;
    fam.require_differentiable()?;
    if samples < 2 {
        return Err(Error::Config("Monte Carlo scheme needs at least two samples".into()));
    }
    let k = fam.k();
    let mut rng = seeded(seed);
    let bs = sample_prior(fam, samples, &mut rng);
    let sd = d0.sqrt();
    let mut hs = Vec::with_capacity(samples);
    let mut h2s = Vec::with_capacity(samples);
    let mut js = Vec::with_capacity(samples);
    let mut vbs = Vec::with_capacity(samples);
    for &b in &bs {
        let z: f64 = StandardNormal.sample(&mut rng);
        let t = d0 * b + sd * z;
        let m = inner_moments(fam, t, d0, NodeLevel::Fine)?;
        hs.push(m.h);
        h2s.push(m.h2);
        js.push(m.cov_bg);
        vbs.push(m.var_b);
    }
    let n = samples as f64;
    let mean_se = |xs: &mut dyn Iterator<Item = f64>| -> (f64, f64) {
        let v: Vec<f64> = xs.collect();
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (var / n).sqrt())
    };
    let m2 = fam.second_moment();
    let mut kappa = DVector::zeros(k);
    let mut kappa_se = DVector::zeros(k);
    let mut j = DVector::zeros(k);
    let mut j_se = DVector::zeros(k);
    let mut h_mean = [0.0; MAX_K];
    for a in 0..k {
        let (m, s) = mean_se(&mut h2s.iter().map(|x| x[a]));
        kappa[a] = 0.5 * m2 * m;
        kappa_se[a] = 0.5 * m2 * s;
        let (m, s) = mean_se(&mut js.iter().map(|x| x[a]));
        j[a] = m;
        j_se[a] = s;
        h_mean[a] = mean_se(&mut hs.iter().map(|x| x[a])).0;
    }
    let mut v = DMatrix::zeros(k, k);
    let mut v_se = DMatrix::zeros(k, k);
    for a in 0..k {
        for c in 0..k {
            let (m, s) = mean_se(&mut hs.iter().map(|x| (x[a] - h_mean[a]) * (x[c] - h_mean[c])));
            v[(a, c)] = m * n / (n - 1.0);
            v_se[(a, c)] = s;
        }
    }
    let (upsilon, upsilon_se) = mean_se(&mut vbs.iter().copied());
    let mut err = upsilon_se.max(v_se.max()).max(j_se.amax());
    if m2.is_finite() {
        err = err.max(kappa_se.amax());
    }
    let bundle = AsymptoticBundle {
        family: fam.id(),
        theta: fam.theta().to_vec(),
        d0,
        fisher: fisher_prior(fam)?,
        v,
        kappa: if m2.is_finite() { kappa } else { DVector::from_element(k, f64::NAN) },
        j,
        upsilon,
        second_moment: m2,
        scheme: SchemeInfo { outer: OuterScheme::MonteCarlo { samples, seed }, inner: node_scheme(fam) },
        error_estimate: err,
    };
    Ok((bundle, McErrors { v: v_se, kappa: kappa_se, j: j_se, upsilon: upsilon_se }))
}

/// `V(θ)` by nested quadrature, checked against `I − E Var(∇ℓ | W)`.
pub fn v_matrix(fam: &PriorFamily, d0: f64) -> Result<DMatrix<f64>> {
    Ok(bundle(fam, d0)?.v)
}

/// `κ(θ) = ½ E[B²] E[h″(W)]`.
pub fn kappa(fam: &PriorFamily, d0: f64) -> Result<DVector<f64>> {
    if !fam.has_closed_form() {
        return Err(Error::Numerical("κ is undefined for the Cauchy family: E[B²] is infinite".into()));
    }
    check_d0(d0)?;
    fam.require_differentiable()?;
    if fam.id() == FamilyId::GaussianMean {
        return Ok(DVector::zeros(1));
    }
    let o = outer_quadrature(fam, d0, OUTER_NODES, NodeLevel::Fine)?;
    let m2 = fam.second_moment();
    Ok(DVector::from_fn(fam.k(), |a, _| 0.5 * m2 * o.e_h2[a]))
}

/// `J(θ) = E_W[∂_θ E(B_{W,d₀,θ})] = E_W[Cov(B, ∇ℓ | W)]`.
pub fn jacobian_j(fam: &PriorFamily, d0: f64) -> Result<DVector<f64>> {
    Ok(bundle(fam, d0)?.j)
}

/// `υ(θ) = E[Var(B | W)]`.
pub fn upsilon(fam: &PriorFamily, d0: f64) -> Result<f64> {
    Ok(bundle(fam, d0)?.upsilon)
}

/// Result of projecting a prior onto a family in the `W`-KL sense.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KlProjection {
    pub theta_star: Vec<f64>,
    /// `E log ∫ e^{W*b − d₀b²/2} dμ_θ*(b)` at the optimum.
    pub objective: f64,
    pub converged: bool,
    /// Distinct optimizer starts reached the same objective at points more than 1e−3 apart.
    pub ambiguous: bool,
}

/// `θ* = argmin_θ KL(W* ‖ W_θ)` for the family `fit`, where `W*` is generated from `mu_star`.
pub fn kl_projection(fit: &PriorFamily, mu_star: &PriorFamily, d0: f64, opts: &OptimOptions) -> Result<KlProjection> {
    check_d0(d0)?;
    if !mu_star.has_closed_form() || !fit.has_closed_form() {
        return Err(Error::Config("KL projection supports the mixture families only".into()));
    }
    let outer = outer_nodes(mu_star, d0, OUTER_NODES);
    let region = Feasible { bounds: fit.optimizer_box(), ordered: fit.id().ordered() };
    let objective = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
        let f = fit.at(theta)?;
        let mut val = 0.0;
        let mut g = vec![0.0; f.k()];
        for &(w, t) in &outer {
            let (ln, gr) = log_normalizer_with_grad(&f, TiltParams::new(t, d0)).expect("closed-form family");
            val += w * ln;
            for a in 0..f.k() {
                g[a] += w * gr[a];
            }
        }
        Ok((val, g))
    };
    let mut results = Vec::new();
    for x0 in region.starts(opts.starts.max(1)) {
        results.push(maximize_bfgs(objective, &region, &x0, opts)?);
    }
    let best = results
        .iter()
        .max_by(|a, b| a.value.total_cmp(&b.value))
        .cloned()
        .expect("at least one start");
    let scale = best.value.abs().max(1.0);
    let ambiguous = results.iter().any(|r| {
        r.converged
            && (best.value - r.value).abs() <= 1e-9 * scale
            && r.x.iter().zip(&best.x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() > 1e-3
    });
    Ok(KlProjection { theta_star: best.x, objective: best.value, converged: best.converged, ambiguous })
}

/// Asymptotic regime of `√p(θ̂ − θ₀)` from `δ̂ = p^{3/2}/n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum Regime {
    Normal { delta: f64 },
    BiasedNormal { delta: f64 },
    Degenerate { delta: f64 },
}

impl Regime {
    pub fn delta(&self) -> f64 {
        match *self {
            Regime::Normal { delta } | Regime::BiasedNormal { delta } | Regime::Degenerate { delta } => delta,
        }
    }

    /// Limiting mean `δV⁻¹κ` and covariance `V⁻¹` of `√p(θ̂ − θ₀)`; `None` when degenerate.
    pub fn limit(&self, b: &AsymptoticBundle) -> Result<Option<(DVector<f64>, DMatrix<f64>)>> {
        match self {
            Regime::Degenerate { .. } => Ok(None),
            _ => Ok(Some((b.v_inv_kappa()? * self.delta(), b.v_inverse()?))),
        }
    }
}

/// `δ̂ < 0.1` is treated as normal, `δ̂ < 10` as normal with a bias, `δ̂ ≥ 10` as degenerate.
pub fn predict_regime(n: usize, p: usize) -> Regime {
    let delta = (p as f64).powf(1.5) / n as f64;
    if delta < 0.1 {
        Regime::Normal { delta }
    } else if delta < 10.0 {
        Regime::BiasedNormal { delta }
    } else {
        Regime::Degenerate { delta }
    }
}
