use serde::{Deserialize, Serialize};

use crate::design::DesignDist;
use crate::error::{Error, Result};
use crate::estimators::Method;
use crate::inference::QLabel;
use crate::priors::{FamilyId, PriorFamily, PriorSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Mse,
    Coverage,
    Debias,
    Asymptotics,
    Timing,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Mse => "mse",
            Experiment::Coverage => "coverage",
            Experiment::Debias => "debias",
            Experiment::Asymptotics => "asymptotics",
            Experiment::Timing => "timing",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NRule {
    /// `n = p²`.
    Square,
    Fixed(usize),
    /// `n = ⌈p^e⌉`.
    Power(f64),
}

impl NRule {
    pub fn n(&self, p: usize) -> usize {
        match *self {
            NRule::Square => p * p,
            NRule::Fixed(n) => n,
            NRule::Power(e) => (p as f64).powf(e).ceil() as usize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignMode {
    FreshPerReplicate,
    #[default]
    FixedAcrossReplicates,
}

/// Inclusive grid `start, start + step, …, stop`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Grid {
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Config(format!("grid must look like start:stop:step, got {s:?}"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let v: Vec<f64> = parts.iter().map(|x| x.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<_>>()?;
        let g = Grid { start: v[0], stop: v[1], step: v[2] };
        g.values()?;
        Ok(g)
    }

    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.step > 0.0) || !(self.stop >= self.start) || !self.start.is_finite() || !self.stop.is_finite() {
            return Err(Error::Config(format!("invalid grid {self:?}")));
        }
        let count = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        if count > 1_000_000 {
            return Err(Error::Config(format!("grid has {count} points")));
        }
        Ok((0..count).map(|i| ((self.start + i as f64 * self.step) * 1e12).round() / 1e12).collect())
    }
}

fn default_replicates() -> usize {
    400
}
fn default_alpha() -> f64 {
    0.1
}
fn default_q_labels() -> Vec<QLabel> {
    vec![QLabel::Avg, QLabel::Contrast]
}
fn default_estimators() -> Vec<Method> {
    vec![Method::Veb]
}
fn default_sigma2() -> f64 {
    1.0
}
fn default_sweeps() -> usize {
    5000
}
fn default_bins() -> usize {
    30
}

/// Declarative description of one simulation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    /// True prior generating `β*`; its family is also the fitted family.
    pub prior: PriorSpec,
    #[serde(default)]
    pub p_grid: Vec<usize>,
    #[serde(default = "NRule::default_rule")]
    pub n_rule: NRule,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_q_labels")]
    pub q_labels: Vec<QLabel>,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Method>,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_sigma2")]
    pub sigma2: f64,
    #[serde(default)]
    pub design_mode: DesignMode,
    #[serde(default)]
    pub design_dist: DesignDist,
    /// Fit with `σ̂²` from least-squares residuals instead of the true `σ²`.
    #[serde(default)]
    pub estimate_sigma2: bool,
    #[serde(default = "default_sweeps")]
    pub gibbs_sweeps: usize,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    /// Asymptotics only: values of `θ[grid_coord]`, other coordinates from `prior`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_grid: Option<Grid>,
    #[serde(default)]
    pub grid_coord: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

impl NRule {
    fn default_rule() -> NRule {
        NRule::Square
    }
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment, prior: PriorSpec) -> Self {
        ExperimentConfig {
            experiment,
            prior,
            p_grid: Vec::new(),
            n_rule: NRule::Square,
            replicates: default_replicates(),
            alpha: default_alpha(),
            q_labels: default_q_labels(),
            estimators: default_estimators(),
            master_seed: 0,
            sigma2: default_sigma2(),
            design_mode: DesignMode::default(),
            design_dist: DesignDist::default(),
            estimate_sigma2: false,
            gibbs_sweeps: default_sweeps(),
            histogram_bins: default_bins(),
            theta_grid: None,
            grid_coord: 0,
            threads: None,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn family(&self) -> Result<PriorFamily> {
        PriorFamily::try_from(self.prior.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let fam = self.family()?;
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::Config(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        if self.experiment == Experiment::Asymptotics {
            let grid = self.theta_grid.ok_or_else(|| Error::Config("asymptotics needs theta_grid".into()))?;
            grid.values()?;
            if self.grid_coord >= fam.k() {
                return Err(Error::Config(format!("grid_coord {} out of range for {}", self.grid_coord, fam.id())));
            }
            return Ok(());
        }
        if self.p_grid.is_empty() {
            return Err(Error::Config("p_grid is empty".into()));
        }
        if self.p_grid.windows(2).any(|w| w[0] >= w[1]) || self.p_grid[0] == 0 {
            return Err(Error::Config("p_grid must be positive and strictly increasing".into()));
        }
        if self.replicates == 0 && self.experiment != Experiment::Timing {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        for &p in &self.p_grid {
            let n = self.n_rule.n(p);
            if n < p {
                return Err(Error::Config(format!("n = {n} is below p = {p}")));
            }
        }
        if self.estimators.is_empty() && matches!(self.experiment, Experiment::Mse | Experiment::Timing) {
            return Err(Error::Config("no estimators requested".into()));
        }
        for m in &self.estimators {
            match m {
                Method::ExactMml if fam.id() != FamilyId::Bernoulli => {
                    return Err(Error::Config("exact_mml is available for the Bernoulli family only".into()));
                }
                Method::Mom if fam.id() == FamilyId::CauchyLocation => {
                    return Err(Error::Config("mom is not available for the Cauchy family".into()));
                }
                _ => {}
            }
        }
        if self.experiment == Experiment::Coverage {
            if self.q_labels.is_empty() || self.q_labels.contains(&QLabel::Custom) {
                return Err(Error::Config("coverage needs q_labels drawn from avg and contrast".into()));
            }
            if self.q_labels.contains(&QLabel::Contrast) && self.p_grid.iter().any(|p| p % 2 == 1) {
                return Err(Error::Config("the contrast direction needs even p".into()));
            }
            if self.gibbs_sweeps < 2 {
                return Err(Error::Config("gibbs_sweeps must be at least 2".into()));
            }
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        Ok(())
    }
}
