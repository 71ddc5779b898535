//! Projection statistics, credible intervals for `⟨q, β⟩`, and coverage.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::asymptotics::AsymptoticBundle;
use crate::error::{Error, Result};
use crate::meanfield::{upsilon_hat, MeanFieldSolution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QLabel {
    Avg,
    Contrast,
    Custom,
}

impl QLabel {
    pub fn name(self) -> &'static str {
        match self {
            QLabel::Avg => "avg",
            QLabel::Contrast => "contrast",
            QLabel::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub q: DVector<f64>,
    /// Limit of `p^{-1/2} Σ qᵢ`.
    pub gamma: f64,
    pub label: QLabel,
}

impl ProjectionSpec {
    /// A user-supplied direction. `q` is normalized; `gamma` is taken at face value.
    pub fn custom(q: DVector<f64>, gamma: f64) -> Result<Self> {
        let norm = q.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Config("q must be a non-zero finite vector".into()));
        }
        if !(gamma.abs() <= 1.0) {
            return Err(Error::Config(format!("|gamma| must be at most 1, got {gamma}")));
        }
        Ok(ProjectionSpec { q: q / norm, gamma, label: QLabel::Custom })
    }

    pub fn p(&self) -> usize {
        self.q.len()
    }

    /// `Σ qᵢ⁴`. The interval theory wants this small next to `n/p²`; custom
    /// directions are not checked, so callers can inspect it here.
    pub fn fourth_power_sum(&self) -> f64 {
        self.q.iter().map(|x| x.powi(4)).sum()
    }

    pub fn project(&self, beta: &[f64]) -> f64 {
        self.q.iter().zip(beta).map(|(a, b)| a * b).sum()
    }
}

/// `Avg = 1/√p`, `Contrast = (1, …, 1, −1, …, −1)/√p`.
pub fn make_q(label: QLabel, p: usize) -> Result<ProjectionSpec> {
    if p == 0 {
        return Err(Error::Config("p must be positive".into()));
    }
    let s = 1.0 / (p as f64).sqrt();
    match label {
        QLabel::Avg => Ok(ProjectionSpec { q: DVector::from_element(p, s), gamma: 1.0, label }),
        QLabel::Contrast => {
            if p % 2 == 1 {
                return Err(Error::Config(format!("the contrast direction needs even p, got {p}")));
            }
            let q = DVector::from_fn(p, |i, _| if i < p / 2 { s } else { -s });
            Ok(ProjectionSpec { q, gamma: 0.0, label })
        }
        QLabel::Custom => Err(Error::Config("custom directions are built with ProjectionSpec::custom".into())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiKind {
    Oracle,
    Eb,
    AdjustedEb,
}

impl CiKind {
    pub fn name(self) -> &'static str {
        match self {
            CiKind::Oracle => "oracle",
            CiKind::Eb => "eb",
            CiKind::AdjustedEb => "adjusted_eb",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CredibleInterval {
    pub center: f64,
    pub half_width: f64,
    pub alpha: f64,
    pub kind: CiKind,
}

impl CredibleInterval {
    pub fn lower(&self) -> f64 {
        self.center - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.center + self.half_width
    }

    pub fn width(&self) -> f64 {
        2.0 * self.half_width
    }

    pub fn contains(&self, x: f64) -> bool {
        (x - self.center).abs() <= self.half_width
    }
}

/// Upper `α/2` quantile of the standard normal.
pub fn critical_value(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let z = Normal::standard();
    Ok(z.inverse_cdf(1.0 - alpha / 2.0))
}

fn centered(sol: &MeanFieldSolution, spec: &ProjectionSpec) -> Result<(f64, f64)> {
    if spec.p() != sol.p() {
        return Err(Error::Contract(format!("q has length {}, solution has {}", spec.p(), sol.p())));
    }
    Ok((spec.q.dot(&sol.u), upsilon_hat(sol, &spec.q)?))
}

fn interval(center: f64, variance: f64, alpha: f64, kind: CiKind) -> Result<CredibleInterval> {
    let c = critical_value(alpha)?;
    Ok(CredibleInterval { center, half_width: c * variance.max(0.0).sqrt(), alpha, kind })
}

/// `⟨q, û⟩ ± c_{α/2} √υ̂` from a mean-field fit at the estimated prior.
pub fn ci_eb(sol: &MeanFieldSolution, spec: &ProjectionSpec, alpha: f64) -> Result<CredibleInterval> {
    let (c, v) = centered(sol, spec)?;
    interval(c, v, alpha, CiKind::Eb)
}

/// The same construction with the mean-field fit at the true prior.
pub fn ci_oracle(sol: &MeanFieldSolution, spec: &ProjectionSpec, alpha: f64) -> Result<CredibleInterval> {
    let (c, v) = centered(sol, spec)?;
    interval(c, v, alpha, CiKind::Oracle)
}

/// Widens the EB interval by `γ² JᵀV⁻¹J` to account for the estimation of `θ`.
///
/// `asy` must be evaluated at the estimate.
pub fn ci_adjusted(
    sol: &MeanFieldSolution,
    spec: &ProjectionSpec,
    alpha: f64,
    asy: &AsymptoticBundle,
) -> Result<CredibleInterval> {
    let (c, v) = centered(sol, spec)?;
    let extra = if spec.gamma == 0.0 { 0.0 } else { spec.gamma * spec.gamma * asy.j_quad_form()? };
    if !extra.is_finite() {
        return Err(Error::Numerical("JᵀV⁻¹J is not finite".into()));
    }
    interval(c, v + extra, alpha, CiKind::AdjustedEb)
}

/// Fraction of `draws` inside the interval.
pub fn coverage_eval(ci: &CredibleInterval, draws: &[f64]) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::Contract("no draws to evaluate coverage on".into()));
    }
    Ok(draws.iter().filter(|&&x| ci.contains(x)).count() as f64 / draws.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageStat {
    pub coverage: f64,
    pub se: f64,
    pub count: usize,
}

/// Mean of per-replicate conditional coverages with its standard error.
pub fn conditional_coverage(per_replicate: &[f64]) -> Result<CoverageStat> {
    let n = per_replicate.len();
    if n == 0 {
        return Err(Error::Contract("no replicates".into()));
    }
    let mean = per_replicate.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        per_replicate.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Ok(CoverageStat { coverage: mean, se: (var / n as f64).sqrt(), count: n })
}

/// Fraction of replicates whose interval contains that replicate's single fresh draw.
pub fn marginal_coverage(pairs: &[(CredibleInterval, f64)]) -> Result<CoverageStat> {
    let n = pairs.len();
    if n == 0 {
        return Err(Error::Contract("no replicates".into()));
    }
    let rate = pairs.iter().filter(|(ci, x)| ci.contains(*x)).count() as f64 / n as f64;
    Ok(CoverageStat { coverage: rate, se: (rate * (1.0 - rate) / n as f64).sqrt(), count: n })
}
