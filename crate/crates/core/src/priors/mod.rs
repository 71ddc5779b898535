//! Parametric prior families and the linear-quadratic tilt engine.
//!
//! A family is described by its log-likelihood `ℓ(θ; b)` against a base
//! measure (counting measure on atoms, Lebesgue measure otherwise, and
//! `δ₀ + Lebesgue` for the spike-and-slab). Everything downstream (the vEB
//! objective, the asymptotic quantities, the mean-field solver and the Gibbs
//! sampler) only needs tilts `∝ e^{tb − db²/2} dμ_θ(b)` of these measures.

mod sampling;
mod tilt;

pub use sampling::{sample_prior, sample_tilted};
pub use tilt::{
    node_scheme, tilt_expect, tilt_log_normalizer, tilt_moments, tilt_moments_quadrature, tilted_nodes, NodeLevel,
    Scheme, TiltParams, TiltedMoments, TiltedNodes,
};
pub(crate) use tilt::log_normalizer_with_grad;

use std::f64::consts::PI;
use std::fmt;

use arrayvec::ArrayVec;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Component variances of the location mixture `½N(θ₁, 1) + ½N(θ₂, 0.25)`.
pub const LOCATION_GMM_VARIANCES: [f64; 2] = [1.0, 0.25];

/// Largest parameter dimension of any implemented family.
pub const MAX_K: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyId {
    /// `N(θ, 1)`.
    GaussianMean,
    /// `Ber(π)` on `{0, 1}`.
    Bernoulli,
    /// `π δ₀ + (1 − π) N(0, τ²)`, parameters `(π, τ)`.
    SpikeSlab,
    /// `½N(θ₁, 1) + ½N(θ₂, 0.25)`.
    LocationGmm,
    /// `½N(θ, 1) + ½N(−θ, 1)`.
    SymmetricGmm,
    /// Standard Cauchy with location `θ`.
    CauchyLocation,
}

impl FamilyId {
    pub const ALL: [FamilyId; 6] = [
        FamilyId::GaussianMean,
        FamilyId::Bernoulli,
        FamilyId::SpikeSlab,
        FamilyId::LocationGmm,
        FamilyId::SymmetricGmm,
        FamilyId::CauchyLocation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FamilyId::GaussianMean => "gaussian_mean",
            FamilyId::Bernoulli => "bernoulli",
            FamilyId::SpikeSlab => "spike_slab",
            FamilyId::LocationGmm => "location_gmm",
            FamilyId::SymmetricGmm => "symmetric_gmm",
            FamilyId::CauchyLocation => "cauchy_location",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        FamilyId::ALL
            .into_iter()
            .find(|f| f.name() == norm)
            .or(match norm.as_str() {
                "ber" => Some(FamilyId::Bernoulli),
                "gaussian" | "normal" => Some(FamilyId::GaussianMean),
                "gmm" => Some(FamilyId::LocationGmm),
                "cauchy" => Some(FamilyId::CauchyLocation),
                _ => None,
            })
            .ok_or_else(|| Error::Config(format!("unknown prior family `{s}`")))
    }

    /// Number of free parameters.
    pub fn dim(self) -> usize {
        match self {
            FamilyId::SpikeSlab | FamilyId::LocationGmm => 2,
            _ => 1,
        }
    }

    /// Compact parameter box used by the estimators.
    pub fn default_box(self) -> Vec<[f64; 2]> {
        match self {
            FamilyId::GaussianMean => vec![[-5.0, 5.0]],
            FamilyId::Bernoulli => vec![[0.0, 1.0]],
            FamilyId::SpikeSlab => vec![[0.0, 1.0], [0.2, 5.0]],
            FamilyId::LocationGmm => vec![[-2.0, 2.0], [-2.0, 2.0]],
            FamilyId::SymmetricGmm => vec![[0.0, 3.0]],
            FamilyId::CauchyLocation => vec![[-5.0, 5.0]],
        }
    }

    pub fn support(self) -> Support {
        match self {
            FamilyId::Bernoulli => Support::FiniteAtoms(vec![0.0, 1.0]),
            FamilyId::SpikeSlab => Support::AtomPlusLebesgue,
            _ => Support::Lebesgue,
        }
    }

    /// Coordinates whose log-likelihood derivative blows up on the box boundary.
    fn singular_at_boundary(self, coord: usize) -> bool {
        matches!((self, coord), (FamilyId::Bernoulli, 0) | (FamilyId::SpikeSlab, 0))
    }

    /// Whether the estimators restrict the search to `θ₁ ≤ θ₂`.
    pub fn ordered(self) -> bool {
        self == FamilyId::LocationGmm
    }
}

impl fmt::Display for FamilyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Support {
    FiniteAtoms(Vec<f64>),
    Lebesgue,
    AtomPlusLebesgue,
}

/// Serialized form of a prior: `{"family": ..., "theta": [...], "theta_box": [[lo, hi], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub family: FamilyId,
    pub theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_box: Option<Vec<[f64; 2]>>,
}

/// A prior `μ_θ` from one of the implemented families, at a specific `θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PriorSpec", into = "PriorSpec")]
pub struct PriorFamily {
    id: FamilyId,
    theta: ArrayVec<f64, MAX_K>,
    theta_box: ArrayVec<[f64; 2], MAX_K>,
}

impl TryFrom<PriorSpec> for PriorFamily {
    type Error = Error;

    fn try_from(spec: PriorSpec) -> Result<Self> {
        let fam = PriorFamily::new(spec.family, &spec.theta)?;
        match spec.theta_box {
            Some(b) => fam.with_box(&b),
            None => Ok(fam),
        }
    }
}

impl From<PriorFamily> for PriorSpec {
    fn from(f: PriorFamily) -> Self {
        PriorSpec {
            family: f.id,
            theta: f.theta.to_vec(),
            theta_box: Some(f.theta_box.to_vec()),
        }
    }
}

/// One component of a tilted or untilted mixture; atoms have zero variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Component {
    pub log_weight: f64,
    pub mean: f64,
    pub var: f64,
}

pub(crate) type Mixture = ArrayVec<Component, 2>;

impl PriorFamily {
    pub fn new(id: FamilyId, theta: &[f64]) -> Result<Self> {
        if theta.len() != id.dim() {
            return Err(Error::Config(format!(
                "{id} expects {} parameter(s), got {}",
                id.dim(),
                theta.len()
            )));
        }
        let fam = PriorFamily {
            id,
            theta: theta.iter().copied().collect(),
            theta_box: id.default_box().into_iter().collect(),
        };
        fam.check_in_box(theta)?;
        Ok(fam)
    }

    pub fn gaussian_mean(theta: f64) -> Self {
        Self::new(FamilyId::GaussianMean, &[theta]).expect("θ outside default box")
    }

    pub fn bernoulli(pi: f64) -> Self {
        Self::new(FamilyId::Bernoulli, &[pi]).expect("π outside [0, 1]")
    }

    pub fn spike_slab(pi: f64, tau: f64) -> Self {
        Self::new(FamilyId::SpikeSlab, &[pi, tau]).expect("(π, τ) outside default box")
    }

    pub fn location_gmm(theta1: f64, theta2: f64) -> Self {
        Self::new(FamilyId::LocationGmm, &[theta1, theta2]).expect("(θ₁, θ₂) outside default box")
    }

    pub fn symmetric_gmm(theta: f64) -> Self {
        Self::new(FamilyId::SymmetricGmm, &[theta]).expect("θ outside default box")
    }

    pub fn cauchy_location(theta: f64) -> Self {
        Self::new(FamilyId::CauchyLocation, &[theta]).expect("θ outside default box")
    }

    /// Replace the parameter box; the current `θ` must lie inside it.
    pub fn with_box(mut self, bounds: &[[f64; 2]]) -> Result<Self> {
        if bounds.len() != self.id.dim() || bounds.iter().any(|b| !(b[0] <= b[1]) || !b[0].is_finite() || !b[1].is_finite()) {
            return Err(Error::Config(format!("invalid parameter box {bounds:?} for {}", self.id)));
        }
        self.theta_box = bounds.iter().copied().collect();
        self.check_in_box(&self.theta.clone())?;
        Ok(self)
    }

    /// Same family and box at a different `θ`.
    pub fn at(&self, theta: &[f64]) -> Result<Self> {
        if theta.len() != self.k() {
            return Err(Error::Contract(format!("{} expects θ of length {}", self.id, self.k())));
        }
        self.check_in_box(theta)?;
        let mut out = self.clone();
        out.theta = theta.iter().copied().collect();
        Ok(out)
    }

    fn check_in_box(&self, theta: &[f64]) -> Result<()> {
        let ok = theta
            .iter()
            .zip(&self.theta_box)
            .all(|(t, b)| t.is_finite() && *t >= b[0] && *t <= b[1]);
        if ok {
            Ok(())
        } else {
            Err(Error::OutOfBox { theta: theta.to_vec() })
        }
    }

    pub fn id(&self) -> FamilyId {
        self.id
    }

    pub fn k(&self) -> usize {
        self.id.dim()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_box(&self) -> &[[f64; 2]] {
        &self.theta_box
    }

    pub fn support(&self) -> Support {
        self.id.support()
    }

    pub fn spec(&self) -> PriorSpec {
        self.clone().into()
    }

    /// Error if a derivative of `ℓ` is requested where it does not exist.
    pub fn require_differentiable(&self) -> Result<()> {
        for (i, (&t, b)) in self.theta.iter().zip(&self.theta_box).enumerate() {
            if self.id.singular_at_boundary(i) && (t <= 0.0 || t >= 1.0) {
                let _ = b;
                return Err(Error::Boundary {
                    theta: self.theta.to_vec(),
                    what: "the log-likelihood gradient",
                });
            }
        }
        Ok(())
    }

    /// Box used by optimizers: coordinates with boundary singularities are pulled in slightly.
    pub fn optimizer_box(&self) -> Vec<[f64; 2]> {
        const PULL: f64 = 1e-9;
        self.theta_box
            .iter()
            .enumerate()
            .map(|(i, b)| {
                if self.id.singular_at_boundary(i) {
                    [b[0].max(PULL), b[1].min(1.0 - PULL)]
                } else {
                    *b
                }
            })
            .collect()
    }

    /// `ℓ(θ; b)` against the family's base measure.
    pub fn log_prior_lik(&self, b: f64) -> Result<f64> {
        let th = &self.theta;
        match self.id {
            FamilyId::Bernoulli => {
                let pi = th[0];
                if b == 1.0 {
                    Ok(pi.ln())
                } else if b == 0.0 {
                    Ok((1.0 - pi).ln())
                } else {
                    Err(Error::Domain { family: "bernoulli", value: b })
                }
            }
            FamilyId::SpikeSlab => {
                if !b.is_finite() {
                    return Err(Error::Domain { family: "spike_slab", value: b });
                }
                let (pi, tau) = (th[0], th[1]);
                if b == 0.0 {
                    Ok(pi.ln())
                } else {
                    Ok((1.0 - pi).ln() + log_normal_pdf(b, 0.0, tau * tau))
                }
            }
            FamilyId::CauchyLocation => {
                if !b.is_finite() {
                    return Err(Error::Domain { family: "cauchy_location", value: b });
                }
                let z = b - th[0];
                Ok(-PI.ln() - (1.0 + z * z).ln())
            }
            _ => {
                if !b.is_finite() {
                    return Err(Error::Domain { family: self.id.name(), value: b });
                }
                Ok(log_sum_exp(self.mixture().iter().map(|c| c.log_weight + log_normal_pdf(b, c.mean, c.var))))
            }
        }
    }

    /// `∂ℓ/∂θ`.
    pub fn grad_loglik(&self, b: f64) -> Result<Vec<f64>> {
        self.require_differentiable()?;
        self.check_support(b)?;
        let mut g = [0.0; MAX_K];
        self.grad_into(b, &mut g);
        Ok(g[..self.k()].to_vec())
    }

    /// `∂²ℓ/∂θ²`.
    pub fn hess_loglik(&self, b: f64) -> Result<DMatrix<f64>> {
        self.require_differentiable()?;
        self.check_support(b)?;
        let mut h = [[0.0; MAX_K]; MAX_K];
        self.hess_into(b, &mut h);
        let k = self.k();
        Ok(DMatrix::from_fn(k, k, |i, j| h[i][j]))
    }

    fn check_support(&self, b: f64) -> Result<()> {
        match self.id {
            FamilyId::Bernoulli if b != 0.0 && b != 1.0 => Err(Error::Domain { family: "bernoulli", value: b }),
            _ if !b.is_finite() => Err(Error::Domain { family: self.id.name(), value: b }),
            _ => Ok(()),
        }
    }

    /// Unchecked gradient; caller guarantees `b` in support and `θ` interior.
    pub(crate) fn grad_into(&self, b: f64, out: &mut [f64; MAX_K]) {
        let th = &self.theta;
        match self.id {
            FamilyId::Bernoulli => {
                out[0] = if b == 1.0 { 1.0 / th[0] } else { -1.0 / (1.0 - th[0]) };
            }
            FamilyId::SpikeSlab => {
                let (pi, tau) = (th[0], th[1]);
                if b == 0.0 {
                    out[0] = 1.0 / pi;
                    out[1] = 0.0;
                } else {
                    out[0] = -1.0 / (1.0 - pi);
                    out[1] = -1.0 / tau + b * b / (tau * tau * tau);
                }
            }
            FamilyId::CauchyLocation => {
                let z = b - th[0];
                out[0] = 2.0 * z / (1.0 + z * z);
            }
            _ => {
                let (resp, score) = self.location_scores(b);
                for a in 0..self.k() {
                    out[a] = resp.iter().zip(&score).map(|(r, s)| r * s[a]).sum();
                }
            }
        }
    }

    pub(crate) fn hess_into(&self, b: f64, out: &mut [[f64; MAX_K]; MAX_K]) {
        let th = &self.theta;
        *out = [[0.0; MAX_K]; MAX_K];
        match self.id {
            FamilyId::Bernoulli => {
                let pi = th[0];
                out[0][0] = if b == 1.0 { -1.0 / (pi * pi) } else { -1.0 / ((1.0 - pi) * (1.0 - pi)) };
            }
            FamilyId::SpikeSlab => {
                let (pi, tau) = (th[0], th[1]);
                if b == 0.0 {
                    out[0][0] = -1.0 / (pi * pi);
                } else {
                    out[0][0] = -1.0 / ((1.0 - pi) * (1.0 - pi));
                    out[1][1] = 1.0 / (tau * tau) - 3.0 * b * b / tau.powi(4);
                }
            }
            FamilyId::CauchyLocation => {
                let z = b - th[0];
                let q = 1.0 + z * z;
                out[0][0] = (2.0 * z * z - 2.0) / (q * q);
            }
            _ => {
                let k = self.k();
                let (resp, score) = self.location_scores(b);
                let loadings = self.loadings();
                let vars = self.component_vars();
                let mut g = [0.0; MAX_K];
                for a in 0..k {
                    g[a] = resp.iter().zip(&score).map(|(r, s)| r * s[a]).sum();
                }
                for a in 0..k {
                    for c in 0..k {
                        let mut acc = 0.0;
                        for (j, r) in resp.iter().enumerate() {
                            acc += r * (score[j][a] * score[j][c] - loadings[j][a] * loadings[j][c] / vars[j]);
                        }
                        out[a][c] = acc - g[a] * g[c];
                    }
                }
            }
        }
    }

    /// Component means are `Σ_a loadings[k][a] θ_a` for the Gaussian location families.
    pub(crate) fn loadings(&self) -> ArrayVec<[f64; MAX_K], 2> {
        let mut l = ArrayVec::new();
        match self.id {
            FamilyId::GaussianMean => l.push([1.0, 0.0]),
            FamilyId::LocationGmm => {
                l.push([1.0, 0.0]);
                l.push([0.0, 1.0]);
            }
            FamilyId::SymmetricGmm => {
                l.push([1.0, 0.0]);
                l.push([-1.0, 0.0]);
            }
            _ => unreachable!("loadings only defined for Gaussian location families"),
        }
        l
    }

    pub(crate) fn component_vars(&self) -> ArrayVec<f64, 2> {
        match self.id {
            FamilyId::GaussianMean => [1.0].into_iter().collect(),
            FamilyId::LocationGmm => LOCATION_GMM_VARIANCES.into_iter().collect(),
            FamilyId::SymmetricGmm => [1.0, 1.0].into_iter().collect(),
            _ => unreachable!("component variances only defined for Gaussian location families"),
        }
    }

    /// Responsibilities and per-component scores `∂_θ log φ_k(b)`.
    fn location_scores(&self, b: f64) -> (ArrayVec<f64, 2>, ArrayVec<[f64; MAX_K], 2>) {
        let mix = self.mixture();
        let loadings = self.loadings();
        let logs: ArrayVec<f64, 2> = mix.iter().map(|c| c.log_weight + log_normal_pdf(b, c.mean, c.var)).collect();
        let lse = log_sum_exp(logs.iter().copied());
        let resp = logs.iter().map(|l| (l - lse).exp()).collect();
        let score = mix
            .iter()
            .zip(&loadings)
            .map(|(c, l)| {
                let s = (b - c.mean) / c.var;
                [l[0] * s, l[1] * s]
            })
            .collect();
        (resp, score)
    }

    /// Closed-form mixture representation (atoms have zero variance).
    ///
    /// Not available for the Cauchy family.
    pub(crate) fn mixture(&self) -> Mixture {
        let th = &self.theta;
        let mut m = Mixture::new();
        let half = 0.5_f64.ln();
        match self.id {
            FamilyId::GaussianMean => m.push(Component { log_weight: 0.0, mean: th[0], var: 1.0 }),
            FamilyId::Bernoulli => {
                m.push(Component { log_weight: (1.0 - th[0]).ln(), mean: 0.0, var: 0.0 });
                m.push(Component { log_weight: th[0].ln(), mean: 1.0, var: 0.0 });
            }
            FamilyId::SpikeSlab => {
                m.push(Component { log_weight: th[0].ln(), mean: 0.0, var: 0.0 });
                m.push(Component { log_weight: (1.0 - th[0]).ln(), mean: 0.0, var: th[1] * th[1] });
            }
            FamilyId::LocationGmm => {
                m.push(Component { log_weight: half, mean: th[0], var: LOCATION_GMM_VARIANCES[0] });
                m.push(Component { log_weight: half, mean: th[1], var: LOCATION_GMM_VARIANCES[1] });
            }
            FamilyId::SymmetricGmm => {
                m.push(Component { log_weight: half, mean: th[0], var: 1.0 });
                m.push(Component { log_weight: half, mean: -th[0], var: 1.0 });
            }
            FamilyId::CauchyLocation => unreachable!("the Cauchy family has no mixture form"),
        }
        m
    }

    /// Whether per-component Gauss–Hermite integrates the score accurately:
    /// true when the score is polynomial on each component. Mixtures of
    /// location components have logistic responsibilities in the score and go
    /// through composite Gauss–Legendre instead.
    pub(crate) fn gh_suitable(&self) -> bool {
        matches!(self.id, FamilyId::GaussianMean | FamilyId::Bernoulli | FamilyId::SpikeSlab)
    }

    pub(crate) fn has_closed_form(&self) -> bool {
        self.id != FamilyId::CauchyLocation
    }

    /// Log-density of the Lebesgue part (−∞ for purely atomic families).
    pub(crate) fn lebesgue_log_density(&self, b: f64) -> f64 {
        match self.id {
            FamilyId::Bernoulli => f64::NEG_INFINITY,
            FamilyId::SpikeSlab => (1.0 - self.theta[0]).ln() + log_normal_pdf(b, 0.0, self.theta[1] * self.theta[1]),
            FamilyId::CauchyLocation => {
                let z = b - self.theta[0];
                -PI.ln() - (1.0 + z * z).ln()
            }
            _ => log_sum_exp(self.mixture().iter().map(|c| c.log_weight + log_normal_pdf(b, c.mean, c.var))),
        }
    }

    /// Atoms `(location, log mass)`.
    pub(crate) fn atoms(&self) -> ArrayVec<(f64, f64), 2> {
        match self.id {
            FamilyId::Bernoulli => [(0.0, (1.0 - self.theta[0]).ln()), (1.0, self.theta[0].ln())].into_iter().collect(),
            FamilyId::SpikeSlab => [(0.0, self.theta[0].ln())].into_iter().collect(),
            _ => ArrayVec::new(),
        }
    }

    /// `E[B²]` under `μ_θ` (infinite for the Cauchy family).
    pub fn second_moment(&self) -> f64 {
        if !self.has_closed_form() {
            return f64::INFINITY;
        }
        self.mixture()
            .iter()
            .map(|c| c.log_weight.exp() * (c.var + c.mean * c.mean))
            .sum()
    }

    /// `Var(B)` under `μ_θ`.
    pub fn variance(&self) -> f64 {
        if !self.has_closed_form() {
            return f64::INFINITY;
        }
        let mix = self.mixture();
        let mean: f64 = mix.iter().map(|c| c.log_weight.exp() * c.mean).sum();
        self.second_moment() - mean * mean
    }
}

pub(crate) fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let z = x - mean;
    -LN_SQRT_2PI - 0.5 * var.ln() - z * z / (2.0 * var)
}

pub(crate) fn log_sum_exp<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let v: ArrayVec<f64, 8> = it.into_iter().collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
