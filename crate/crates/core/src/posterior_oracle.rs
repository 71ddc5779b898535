//! Reference posteriors: systematic-scan Gibbs for every family, exact
//! enumeration for the Bernoulli prior at small `p`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::TransformedData;
use crate::error::{Error, Result};
use crate::estimators::{veb_objective, EstimateReport, Method};
use crate::inference::ProjectionSpec;
use crate::meanfield::naive_init;
use crate::priors::{sample_tilted, FamilyId, PriorFamily, TiltParams};
use crate::rng::seeded;
use crate::timing::Stopwatch;

pub const MAX_ENUMERATION_P: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GibbsInit {
    AtTruth(Vec<f64>),
    Naive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsConfig {
    pub sweeps: usize,
    pub burn_in: usize,
    pub init: GibbsInit,
    pub seed: u64,
    /// Keep every retained sweep in [`PosteriorSummary::draws`].
    #[serde(default)]
    pub record_draws: bool,
}

impl GibbsConfig {
    pub fn new(sweeps: usize, init: GibbsInit, seed: u64) -> Self {
        GibbsConfig { sweeps, burn_in: sweeps / 2, init, seed, record_draws: false }
    }

    fn validate(&self, p: usize) -> Result<()> {
        if self.burn_in >= self.sweeps {
            return Err(Error::Config(format!("burn_in {} must be below sweeps {}", self.burn_in, self.sweeps)));
        }
        if let GibbsInit::AtTruth(b) = &self.init {
            if b.len() != p {
                return Err(Error::Contract(format!("initial β has length {}, expected {p}", b.len())));
            }
        }
        Ok(())
    }
}

impl Default for GibbsConfig {
    fn default() -> Self {
        GibbsConfig::new(5000, GibbsInit::Naive, 0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
    /// Per-sweep values of `⟨q, β⟩` keyed by the projection label.
    pub proj_draws: BTreeMap<String, Vec<f64>>,
    /// Batch-means effective sample sizes; equal to the number of states for exact summaries.
    pub ess: DVector<f64>,
    pub retained: usize,
    #[serde(skip)]
    pub draws: Option<DMatrix<f64>>,
}

/// Runs the chain and hands every post-burn-in state to `visit`.
///
/// Each coordinate is drawn from its complete conditional, the tilt at
/// `(mᵢ + wᵢ, dᵢ)` with `mᵢ = Σ_{j≠i} A_ij β_j` kept up to date incrementally.
pub fn gibbs_run(td: &TransformedData, fam: &PriorFamily, cfg: &GibbsConfig, mut visit: impl FnMut(&[f64])) -> Result<()> {
    let p = td.p();
    cfg.validate(p)?;
    let mut beta: Vec<f64> = match &cfg.init {
        GibbsInit::AtTruth(b) => b.clone(),
        GibbsInit::Naive => naive_init(td, fam)?.as_slice().to_vec(),
    };
    let mut field: Vec<f64> = (&td.a * DVector::from_column_slice(&beta)).as_slice().to_vec();
    let mut rng = seeded(cfg.seed);
    for sweep in 0..cfg.sweeps {
        for i in 0..p {
            let new = sample_tilted(fam, TiltParams::new(field[i] + td.w[i], td.d[i]), &mut rng)?;
            let delta = new - beta[i];
            if delta != 0.0 {
                let col = td.a.column(i);
                for (f, a) in field.iter_mut().zip(col.iter()) {
                    *f += delta * a;
                }
                beta[i] = new;
            }
        }
        if sweep >= cfg.burn_in {
            visit(&beta);
        }
    }
    Ok(())
}

/// Posterior means, variances, projection traces and effective sample sizes.
pub fn gibbs_sample(
    td: &TransformedData,
    fam: &PriorFamily,
    cfg: &GibbsConfig,
    projections: &[ProjectionSpec],
) -> Result<PosteriorSummary> {
    let p = td.p();
    for q in projections {
        if q.p() != p {
            return Err(Error::Contract(format!("projection has length {}, expected {p}", q.p())));
        }
    }
    let retained = cfg.sweeps.saturating_sub(cfg.burn_in);
    let batch = ((retained as f64).sqrt().floor() as usize).max(1);
    let n_batches = retained / batch;
    let mut sum = vec![0.0; p];
    let mut sum_sq = vec![0.0; p];
    let mut batch_acc = vec![0.0; p];
    let mut batch_sums: Vec<Vec<f64>> = Vec::with_capacity(n_batches);
    let mut traces: Vec<Vec<f64>> = vec![Vec::with_capacity(retained); projections.len()];
    let mut recorded: Vec<f64> = if cfg.record_draws { Vec::with_capacity(retained * p) } else { Vec::new() };
    let mut k = 0usize;
    gibbs_run(td, fam, cfg, |beta| {
        for i in 0..p {
            sum[i] += beta[i];
            sum_sq[i] += beta[i] * beta[i];
            batch_acc[i] += beta[i];
        }
        for (tr, q) in traces.iter_mut().zip(projections) {
            tr.push(q.project(beta));
        }
        if cfg.record_draws {
            recorded.extend_from_slice(beta);
        }
        k += 1;
        if k % batch == 0 && batch_sums.len() < n_batches {
            batch_sums.push(std::mem::replace(&mut batch_acc, vec![0.0; p]));
        }
    })?;
    let nf = retained as f64;
    let mean = DVector::from_fn(p, |i, _| sum[i] / nf);
    let var = DVector::from_fn(p, |i, _| (sum_sq[i] / nf - mean[i] * mean[i]).max(0.0));
    let ess = DVector::from_fn(p, |i, _| {
        if n_batches < 2 || var[i] == 0.0 {
            return nf;
        }
        let bm: Vec<f64> = batch_sums.iter().map(|s| s[i] / batch as f64).collect();
        let m = bm.iter().sum::<f64>() / n_batches as f64;
        let s2 = bm.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n_batches - 1) as f64;
        if s2 <= 0.0 {
            nf
        } else {
            (nf * var[i] / (batch as f64 * s2)).min(nf)
        }
    });
    let proj_draws = projections.iter().zip(traces).map(|(q, t)| (q.label.name().to_string(), t)).collect();
    let draws = cfg.record_draws.then(|| DMatrix::from_row_slice(retained, p, &recorded));
    Ok(PosteriorSummary { mean, var, proj_draws, ess, retained, draws })
}

/// Visits every `β ∈ {0,1}^p` in Gray-code order with its unnormalized log
/// posterior weight `wᵀβ − ½βᵀDβ + ½βᵀAβ + log π(β)`.
fn enumerate_states(td: &TransformedData, pi: f64, mut visit: impl FnMut(u32, f64)) -> Result<()> {
    let p = td.p();
    if p > MAX_ENUMERATION_P {
        return Err(Error::Scale(format!("exact enumeration supports p ≤ {MAX_ENUMERATION_P}, got {p}")));
    }
    let (lp1, lp0) = (pi.ln(), (1.0 - pi).ln());
    let mut state = 0u32;
    let mut field = vec![0.0; p];
    let mut energy = 0.0;
    let mut ones = 0usize;
    let log_prior = |ones: usize| {
        let a = if ones == 0 { 0.0 } else { ones as f64 * lp1 };
        let b = if ones == p { 0.0 } else { (p - ones) as f64 * lp0 };
        a + b
    };
    visit(0, log_prior(0));
    for g in 1u32..(1u32 << p) {
        let i = g.trailing_zeros() as usize;
        let on = state & (1 << i) == 0;
        let sign = if on { 1.0 } else { -1.0 };
        energy += sign * (td.w[i] - 0.5 * td.d[i] + field[i]);
        for (f, a) in field.iter_mut().zip(td.a.column(i).iter()) {
            *f += sign * a;
        }
        state ^= 1 << i;
        if on {
            ones += 1;
        } else {
            ones -= 1;
        }
        visit(state, energy + log_prior(ones));
    }
    Ok(())
}

fn require_bernoulli(fam: &PriorFamily) -> Result<f64> {
    if fam.id() != FamilyId::Bernoulli {
        return Err(Error::Config(format!("exact enumeration needs the Bernoulli family, got {}", fam.id().name())));
    }
    Ok(fam.theta()[0])
}

/// `−(n/2) log(2πσ²) − ‖y‖²/(2σ²)`.
fn marginal_constant(td: &TransformedData) -> f64 {
    -(td.n as f64 / 2.0) * (2.0 * std::f64::consts::PI * td.sigma2).ln() - td.y_norm2 / (2.0 * td.sigma2)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExactPosterior {
    pub summary: PosteriorSummary,
    /// `log m_θ(y)`.
    pub log_marginal: f64,
}

/// Exact posterior moments and marginal likelihood under the Bernoulli prior.
pub fn exact_enumerate(td: &TransformedData, fam: &PriorFamily) -> Result<ExactPosterior> {
    let pi = require_bernoulli(fam)?;
    let p = td.p();
    let mut top = f64::NEG_INFINITY;
    let mut total = 0.0;
    let mut acc = vec![0.0; p];
    enumerate_states(td, pi, |state, lw| {
        if lw == f64::NEG_INFINITY {
            return;
        }
        if lw > top {
            let r = (top - lw).exp();
            total *= r;
            acc.iter_mut().for_each(|a| *a *= r);
            top = lw;
        }
        let e = (lw - top).exp();
        total += e;
        for (i, a) in acc.iter_mut().enumerate() {
            if state & (1 << i) != 0 {
                *a += e;
            }
        }
    })?;
    let mean = DVector::from_fn(p, |i, _| acc[i] / total);
    let var = mean.map(|m| m * (1.0 - m));
    let states = (1u64 << p) as f64;
    let summary = PosteriorSummary {
        mean,
        var,
        proj_draws: BTreeMap::new(),
        ess: DVector::from_element(p, states),
        retained: 0,
        draws: None,
    };
    Ok(ExactPosterior { summary, log_marginal: marginal_constant(td) + top + total.ln() })
}

/// Normalized posterior probability of every state, indexed by its bit pattern.
pub fn state_probabilities(td: &TransformedData, fam: &PriorFamily) -> Result<Vec<f64>> {
    let pi = require_bernoulli(fam)?;
    let mut lw = vec![f64::NEG_INFINITY; 1usize << td.p().min(MAX_ENUMERATION_P)];
    enumerate_states(td, pi, |s, w| lw[s as usize] = w)?;
    let top = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = lw.iter().map(|w| (w - top).exp()).collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|x| *x /= z);
    Ok(probs)
}

/// `p⁻¹ log m_θ(y)` minus the vEB objective, with the likelihood constants
/// removed from both sides. Zero when the columns of `X` are orthogonal.
pub fn elbo_gap(td: &TransformedData, fam: &PriorFamily) -> Result<f64> {
    let exact = exact_enumerate(td, fam)?;
    let p = td.p() as f64;
    Ok((exact.log_marginal - marginal_constant(td)) / p - veb_objective(td, fam, fam.theta())?)
}

/// `log m_π(y)` profile: the log-sum of state weights grouped by `|β|`.
pub struct MarginalProfile {
    log_z: Vec<f64>,
    constant: f64,
}

impl MarginalProfile {
    pub fn new(td: &TransformedData) -> Result<Self> {
        let p = td.p();
        let mut top = vec![f64::NEG_INFINITY; p + 1];
        let mut sums = vec![0.0; p + 1];
        // Weights at π = ½ differ from the π-free energies by the constant p·log ½.
        enumerate_states(td, 0.5, |s, lw| {
            let k = s.count_ones() as usize;
            let lw = lw + p as f64 * std::f64::consts::LN_2;
            if lw > top[k] {
                sums[k] *= (top[k] - lw).exp();
                top[k] = lw;
            }
            sums[k] += (lw - top[k]).exp();
        })?;
        let log_z = top.iter().zip(&sums).map(|(t, s)| t + s.ln()).collect();
        Ok(MarginalProfile { log_z, constant: marginal_constant(td) })
    }

    pub fn log_marginal(&self, pi: f64) -> f64 {
        let p = self.log_z.len() - 1;
        let terms: Vec<f64> = self
            .log_z
            .iter()
            .enumerate()
            .map(|(k, lz)| {
                let a = if k == 0 { 0.0 } else { k as f64 * pi.ln() };
                let b = if k == p { 0.0 } else { (p - k) as f64 * (1.0 - pi).ln() };
                lz + a + b
            })
            .collect();
        let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.constant + top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln()
    }
}

/// Maximum marginal likelihood estimate of `π` on a uniform grid over `[0, 1]`.
pub fn fit_exact_mml(td: &TransformedData, fam: &PriorFamily, step: f64) -> Result<EstimateReport> {
    require_bernoulli(fam)?;
    if !(step > 0.0 && step <= 0.5) {
        return Err(Error::Config(format!("grid step must lie in (0, 0.5], got {step}")));
    }
    let clock = Stopwatch::start();
    let profile = MarginalProfile::new(td)?;
    let points = (1.0 / step).round() as usize;
    let (mut best, mut best_val) = (0.0, f64::NEG_INFINITY);
    for g in 0..=points {
        let pi = (g as f64 * step).min(1.0);
        let v = profile.log_marginal(pi);
        if v > best_val {
            best = pi;
            best_val = v;
        }
    }
    Ok(EstimateReport {
        method: Method::ExactMml,
        theta_hat: vec![best],
        objective_value: best_val / td.p() as f64,
        iterations: points + 1,
        converged: true,
        wall_time: clock.seconds(),
        clamped: false,
    })
}

const DRAW_MAGIC: &[u8; 8] = b"MFEBDRW1";

/// Columnar little-endian dump: magic, row and column counts as `u64`, then
/// each column's `f64` values in turn.
pub fn write_draws<W: Write>(draws: &DMatrix<f64>, mut out: W) -> Result<()> {
    out.write_all(DRAW_MAGIC)?;
    out.write_all(&(draws.nrows() as u64).to_le_bytes())?;
    out.write_all(&(draws.ncols() as u64).to_le_bytes())?;
    for x in draws.as_slice() {
        out.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_draws<R: Read>(mut input: R) -> Result<DMatrix<f64>> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != DRAW_MAGIC {
        return Err(Error::Config("not a draw file".into()));
    }
    let mut word = [0u8; 8];
    input.read_exact(&mut word)?;
    let rows = u64::from_le_bytes(word) as usize;
    input.read_exact(&mut word)?;
    let cols = u64::from_le_bytes(word) as usize;
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Config("draw file dimensions overflow".into()))?;
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        input.read_exact(&mut word)?;
        data.push(f64::from_le_bytes(word));
    }
    Ok(DMatrix::from_vec(rows, cols, data))
}
