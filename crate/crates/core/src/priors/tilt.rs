//! Linear-quadratic tilts `B_{t,d,θ} ∝ e^{tb − db²/2} dμ_θ(b)`.

use serde::{Deserialize, Serialize};

use super::{log_sum_exp, Component, FamilyId, Mixture, PriorFamily, MAX_K};
use crate::error::{Error, Result};
use crate::quadrature::{gauss_legendre, normal_nodes};

/// Gauss–Hermite nodes per Gaussian component.
pub const GH_NODES: usize = 64;
const GH_NODES_COARSE: usize = 48;
/// Gauss–Legendre nodes per panel for the Cauchy family and the generic route.
pub const GL_NODES: usize = 16;
const GL_NODES_COARSE: usize = 12;
const REFINE_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiltParams {
    pub t: f64,
    pub d: f64,
}

impl TiltParams {
    pub fn new(t: f64, d: f64) -> Self {
        TiltParams { t, d }
    }

    pub(crate) fn validate(&self, fam: &PriorFamily) -> Result<()> {
        if !self.t.is_finite() || !self.d.is_finite() || self.d < 0.0 {
            return Err(Error::Contract(format!("tilt needs finite t and d ≥ 0, got t={} d={}", self.t, self.d)));
        }
        if fam.id() == FamilyId::CauchyLocation && self.d <= 0.0 {
            return Err(Error::Numerical("Cauchy tilt with d = 0 has an infinite normalizer".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    ClosedForm,
    AtomMixture,
    GaussHermite { nodes: usize },
    Quadrature { nodes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiltedMoments {
    pub log_normalizer: f64,
    pub mean: f64,
    pub variance: f64,
    pub scheme: Scheme,
}

/// Resolution of a node set; `Coarse` exists only for refinement checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeLevel {
    Fine,
    Coarse,
}

/// Probability-weighted nodes `(weight, b)` representing a tilted measure.
#[derive(Debug, Clone)]
pub struct TiltedNodes {
    pub log_normalizer: f64,
    pub nodes: Vec<(f64, f64)>,
}

/// Tilted mixture in closed form: per-component posterior weights, means and variances.
pub(crate) fn tilted_mixture(fam: &PriorFamily, tp: TiltParams) -> (Mixture, f64) {
    let TiltParams { t, d } = tp;
    let mut out = Mixture::new();
    for c in fam.mixture() {
        if c.log_weight == f64::NEG_INFINITY {
            continue;
        }
        let tilted = if c.var == 0.0 {
            Component { log_weight: c.log_weight + t * c.mean - 0.5 * d * c.mean * c.mean, mean: c.mean, var: 0.0 }
        } else {
            let (m, v) = (c.mean, c.var);
            let s = 1.0 + d * v;
            let log_z = -0.5 * s.ln() + (m + t * v).powi(2) / (2.0 * v * s) - m * m / (2.0 * v);
            Component { log_weight: c.log_weight + log_z, mean: (m + t * v) / s, var: v / s }
        };
        out.push(tilted);
    }
    let log_norm = log_sum_exp(out.iter().map(|c| c.log_weight));
    for c in out.iter_mut() {
        c.log_weight -= log_norm;
    }
    (out, log_norm)
}

/// Log-normalizer and its exact θ-gradient, for the closed-form families.
///
/// Equals `E ∇ℓ(θ; B_{t,d,θ})`; differentiating the conjugate formulas avoids
/// the node expansion in the optimizer's inner loop.
pub(crate) fn log_normalizer_with_grad(fam: &PriorFamily, tp: TiltParams) -> Option<(f64, [f64; MAX_K])> {
    if !fam.has_closed_form() {
        return None;
    }
    let TiltParams { t, d } = tp;
    let (mix, ln) = tilted_mixture(fam, tp);
    let th = fam.theta();
    let mut g = [0.0; MAX_K];
    let post = |k: usize| mix.get(k).map_or(0.0, |c| c.log_weight.exp());
    match fam.id() {
        FamilyId::Bernoulli => {
            // Components were pushed as (atom 0, atom 1); zero-mass atoms are dropped.
            let p1: f64 = mix.iter().filter(|c| c.mean == 1.0).map(|c| c.log_weight.exp()).sum();
            g[0] = p1 / th[0] - (1.0 - p1) / (1.0 - th[0]);
        }
        FamilyId::SpikeSlab => {
            let (pi, tau) = (th[0], th[1]);
            let slab: f64 = mix.iter().filter(|c| c.var > 0.0).map(|c| c.log_weight.exp()).sum();
            g[0] = (1.0 - slab) / pi - slab / (1.0 - pi);
            let s = 1.0 + d * tau * tau;
            g[1] = slab * (-d * tau / s + t * t * tau / (s * s));
        }
        FamilyId::GaussianMean | FamilyId::LocationGmm | FamilyId::SymmetricGmm => {
            let loadings = fam.loadings();
            let vars = fam.component_vars();
            let prior = fam.mixture();
            for (k, c) in prior.iter().enumerate() {
                let dm = (t - d * c.mean) / (1.0 + d * vars[k]);
                for a in 0..fam.k() {
                    g[a] += post(k) * loadings[k][a] * dm;
                }
            }
        }
        FamilyId::CauchyLocation => unreachable!(),
    }
    Some((ln, g))
}

/// `log ∫ e^{tb − db²/2} dμ_θ(b)`.
pub fn tilt_log_normalizer(fam: &PriorFamily, tp: TiltParams) -> Result<f64> {
    tp.validate(fam)?;
    if fam.has_closed_form() {
        let (_, ln) = tilted_mixture(fam, tp);
        finite(ln, fam, tp)
    } else {
        Ok(tilt_moments(fam, tp)?.log_normalizer)
    }
}

/// Normalizer, mean `ψ′(t)` and variance `ψ″(t)` of the tilt.
pub fn tilt_moments(fam: &PriorFamily, tp: TiltParams) -> Result<TiltedMoments> {
    tp.validate(fam)?;
    if fam.has_closed_form() {
        let (mix, ln) = tilted_mixture(fam, tp);
        let ln = finite(ln, fam, tp)?;
        let mean: f64 = mix.iter().map(|c| c.log_weight.exp() * c.mean).sum();
        let variance: f64 = mix
            .iter()
            .map(|c| c.log_weight.exp() * (c.var + (c.mean - mean).powi(2)))
            .sum();
        let scheme = if fam.id() == FamilyId::Bernoulli { Scheme::AtomMixture } else { Scheme::ClosedForm };
        return Ok(TiltedMoments { log_normalizer: ln, mean, variance: variance.max(0.0), scheme });
    }
    let fine = quadrature_moments(fam, tp, GL_NODES)?;
    let coarse = quadrature_moments(fam, tp, GL_NODES_COARSE)?;
    refinement_check(&[fine.0, fine.1, fine.2], &[coarse.0, coarse.1, coarse.2])?;
    Ok(TiltedMoments {
        log_normalizer: fine.0,
        mean: fine.1,
        variance: fine.2.max(0.0),
        scheme: Scheme::Quadrature { nodes: GL_NODES },
    })
}

fn finite(ln: f64, fam: &PriorFamily, tp: TiltParams) -> Result<f64> {
    if ln.is_finite() {
        Ok(ln)
    } else {
        Err(Error::Numerical(format!(
            "tilt normalizer of {} at θ={:?}, t={}, d={} is not finite",
            fam.id(),
            fam.theta(),
            tp.t,
            tp.d
        )))
    }
}

fn refinement_check(fine: &[f64], coarse: &[f64]) -> Result<()> {
    for (f, c) in fine.iter().zip(coarse) {
        if (f - c).abs() > REFINE_TOL * f.abs().max(1.0) || !f.is_finite() {
            return Err(Error::Numerical(format!(
                "quadrature refinement disagreement: {f} vs {c}"
            )));
        }
    }
    Ok(())
}

/// Node representation of the tilted measure.
///
/// Atoms appear once with their exact tilted mass. Gaussian components are
/// expanded with Gauss–Hermite nodes placed on the tilted component. Mixtures
/// whose components have different variances have responsibilities that are
/// too sharp for that rule, so they and the Cauchy family use composite
/// Gauss–Legendre panels instead.
pub fn tilted_nodes(fam: &PriorFamily, tp: TiltParams, level: NodeLevel) -> Result<TiltedNodes> {
    tp.validate(fam)?;
    let mut nodes = Vec::new();
    let log_normalizer;
    if fam.gh_suitable() {
        let gh = match level {
            NodeLevel::Fine => GH_NODES,
            NodeLevel::Coarse => GH_NODES_COARSE,
        };
        let (mix, ln) = tilted_mixture(fam, tp);
        log_normalizer = finite(ln, fam, tp)?;
        for c in &mix {
            let w = c.log_weight.exp();
            if w == 0.0 {
                continue;
            }
            if c.var == 0.0 {
                nodes.push((w, c.mean));
            } else {
                nodes.extend(normal_nodes(c.mean, c.var, gh).map(|(gw, b)| (w * gw, b)));
            }
        }
    } else {
        let per_panel = match level {
            NodeLevel::Fine => GL_NODES,
            NodeLevel::Coarse => GL_NODES_COARSE,
        };
        let (lo, hi, width) = quadrature_domain(fam, tp);
        let mut logs = atom_log_terms(fam, tp);
        logs.extend(lebesgue_log_terms(fam, tp, lo, hi, width, per_panel));
        log_normalizer = finite(log_sum_exp_slice(logs.iter().map(|x| x.0)), fam, tp)?;
        nodes.extend(logs.into_iter().map(|(l, b)| ((l - log_normalizer).exp(), b)));
    }
    Ok(TiltedNodes { log_normalizer, nodes })
}

/// Rule used by [`tilted_nodes`] for the continuous part of the family.
pub fn node_scheme(fam: &PriorFamily) -> Scheme {
    if fam.id() == FamilyId::Bernoulli {
        Scheme::AtomMixture
    } else if fam.gh_suitable() {
        Scheme::GaussHermite { nodes: GH_NODES }
    } else {
        Scheme::Quadrature { nodes: GL_NODES }
    }
}

/// `E[h(B_{t,d,θ})]` with a refinement check on the continuous part.
pub fn tilt_expect<H>(fam: &PriorFamily, tp: TiltParams, h: H) -> Result<Vec<f64>>
where
    H: Fn(f64) -> Vec<f64>,
{
    let fine = tilted_nodes(fam, tp, NodeLevel::Fine)?;
    let integrate = |nodes: &TiltedNodes| -> Vec<f64> {
        let mut acc: Vec<f64> = Vec::new();
        for &(w, b) in &nodes.nodes {
            let v = h(b);
            if acc.is_empty() {
                acc = vec![0.0; v.len()];
            }
            for (a, x) in acc.iter_mut().zip(v) {
                *a += w * x;
            }
        }
        acc
    };
    let ef = integrate(&fine);
    let has_continuous = fam.id() != FamilyId::Bernoulli;
    if has_continuous {
        let coarse = tilted_nodes(fam, tp, NodeLevel::Coarse)?;
        refinement_check(&ef, &integrate(&coarse))?;
    }
    Ok(ef)
}

/// Normalizer, mean and variance by brute-force quadrature of the base measure.
///
/// Independent of the conjugate formulas: the Lebesgue part is integrated
/// with composite Gauss–Legendre and atoms are summed directly.
pub fn tilt_moments_quadrature(fam: &PriorFamily, tp: TiltParams) -> Result<TiltedMoments> {
    tp.validate(fam)?;
    let (ln, mean, var) = quadrature_moments(fam, tp, GL_NODES)?;
    Ok(TiltedMoments { log_normalizer: ln, mean, variance: var, scheme: Scheme::Quadrature { nodes: GL_NODES } })
}

fn quadrature_moments(fam: &PriorFamily, tp: TiltParams, per_panel: usize) -> Result<(f64, f64, f64)> {
    let mut terms = atom_log_terms(fam, tp);
    if fam.id() != FamilyId::Bernoulli {
        let (lo, hi, width) = quadrature_domain(fam, tp);
        terms.extend(lebesgue_log_terms(fam, tp, lo, hi, width, per_panel));
    }
    let ln = finite(log_sum_exp_slice(terms.iter().map(|x| x.0)), fam, tp)?;
    let mut mean = 0.0;
    for &(l, b) in &terms {
        mean += (l - ln).exp() * b;
    }
    let mut var = 0.0;
    for &(l, b) in &terms {
        var += (l - ln).exp() * (b - mean).powi(2);
    }
    Ok((ln, mean, var))
}

fn atom_log_terms(fam: &PriorFamily, tp: TiltParams) -> Vec<(f64, f64)> {
    fam.atoms()
        .into_iter()
        .map(|(a, lm)| (lm + tp.t * a - 0.5 * tp.d * a * a, a))
        .filter(|(l, _)| *l > f64::NEG_INFINITY)
        .collect()
}

/// Integration range and panel width for the Lebesgue part of the tilt.
fn quadrature_domain(fam: &PriorFamily, tp: TiltParams) -> (f64, f64, f64) {
    if fam.has_closed_form() {
        // Range spanned by the tilted Gaussian components, far into their tails.
        let (mix, _) = tilted_mixture(fam, tp);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut width = 1.0_f64;
        for c in mix.iter().filter(|c| c.var > 0.0) {
            let sd = c.var.sqrt();
            lo = lo.min(c.mean - 14.0 * sd);
            hi = hi.max(c.mean + 14.0 * sd);
            width = width.min(0.5 * sd);
        }
        (lo, hi, width)
    } else {
        let sd = tp.d.recip().sqrt();
        let c = tp.t / tp.d;
        let half = 60.0_f64.sqrt() * sd;
        (c - half, c + half, sd.min(1.0))
    }
}

fn lebesgue_log_terms(
    fam: &PriorFamily,
    tp: TiltParams,
    lo: f64,
    hi: f64,
    width: f64,
    per_panel: usize,
) -> Vec<(f64, f64)> {
    let rule = gauss_legendre(per_panel);
    let panels = ((hi - lo) / width).ceil().max(1.0) as usize;
    let h = (hi - lo) / panels as f64;
    let mut out = Vec::with_capacity(panels * per_panel);
    for j in 0..panels {
        let mid = lo + (j as f64 + 0.5) * h;
        for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
            let b = mid + 0.5 * h * x;
            let l = (0.5 * h * w).ln() + fam.lebesgue_log_density(b) + tp.t * b - 0.5 * tp.d * b * b;
            if l > f64::NEG_INFINITY {
                out.push((l, b));
            }
        }
    }
    out
}

fn log_sum_exp_slice<I: Iterator<Item = f64> + Clone>(it: I) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + it.map(|x| (x - m).exp()).sum::<f64>().ln()
}
