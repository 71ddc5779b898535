//! Synthetic regression instances and the transformed data `(w, d, A, d₀)`.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::{sample_prior, PriorFamily};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignDist {
    #[default]
    Gaussian,
    Rademacher,
}

/// `n × p` design with i.i.d. entries `P/√n`, `P` mean zero and unit variance.
pub fn gen_design<R: Rng + ?Sized>(n: usize, p: usize, dist: DesignDist, rng: &mut R) -> Result<DMatrix<f64>> {
    if p == 0 || n < p {
        return Err(Error::Config(format!("design needs n ≥ p ≥ 1, got n={n}, p={p}")));
    }
    let scale = (n as f64).sqrt().recip();
    let entries = (0..n * p).map(|_| match dist {
        DesignDist::Gaussian => {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        }
        DesignDist::Rademacher => {
            if rng.random::<bool>() {
                scale
            } else {
                -scale
            }
        }
    });
    Ok(DMatrix::from_iterator(n, p, entries))
}

/// A design matrix together with its Gram matrix `XᵀX`, computed once.
#[derive(Debug, Clone)]
pub struct Design {
    x: DMatrix<f64>,
    gram: DMatrix<f64>,
}

impl Design {
    pub fn new(x: DMatrix<f64>) -> Self {
        let gram = x.tr_mul(&x);
        Design { x, gram }
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }
}

#[derive(Debug, Clone)]
pub struct RegressionInstance {
    pub design: Arc<Design>,
    pub y: DVector<f64>,
    pub beta_star: DVector<f64>,
    pub sigma2: f64,
}

impl RegressionInstance {
    pub fn x(&self) -> &DMatrix<f64> {
        self.design.x()
    }

    pub fn n(&self) -> usize {
        self.design.n()
    }

    pub fn p(&self) -> usize {
        self.design.p()
    }
}

/// Draw `β* ~ μ_θ` i.i.d. and `y = Xβ* + σε` on a given design.
pub fn gen_response<R: Rng + ?Sized>(
    design: Arc<Design>,
    family: &PriorFamily,
    sigma2: f64,
    rng: &mut R,
) -> Result<RegressionInstance> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::Config(format!("σ² must be positive, got {sigma2}")));
    }
    let beta = DVector::from_vec(sample_prior(family, design.p(), rng));
    let sigma = sigma2.sqrt();
    let noise = DVector::from_iterator(
        design.n(),
        (0..design.n()).map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        }),
    );
    let y = design.x() * &beta + noise;
    Ok(RegressionInstance { design, y, beta_star: beta, sigma2 })
}

/// Fresh Gaussian design plus response.
pub fn gen_instance<R: Rng + ?Sized>(
    family: &PriorFamily,
    n: usize,
    p: usize,
    sigma2: f64,
    rng: &mut R,
) -> Result<RegressionInstance> {
    let x = gen_design(n, p, DesignDist::Gaussian, rng)?;
    gen_response(Arc::new(Design::new(x)), family, sigma2, rng)
}

/// `w = Xᵀy/σ²`, `d = diag(XᵀX)/σ²`, `A = −offdiag(XᵀX)/σ²`, `d₀ = 1/σ²`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformedData {
    pub w: DVector<f64>,
    pub d: DVector<f64>,
    pub a: DMatrix<f64>,
    pub d0: f64,
    pub sigma2: f64,
    /// Sample size and `‖y‖²`, needed only for the exact marginal likelihood.
    pub n: usize,
    pub y_norm2: f64,
    #[serde(skip)]
    a_norm: OnceLock<f64>,
}

impl TransformedData {
    /// Build directly from `(w, d, A)`; `A` must be symmetric with zero diagonal.
    pub fn from_parts(w: DVector<f64>, d: DVector<f64>, a: DMatrix<f64>, sigma2: f64) -> Result<Self> {
        let p = w.len();
        if d.len() != p || a.nrows() != p || a.ncols() != p {
            return Err(Error::Contract("w, d and A must share the dimension p".into()));
        }
        if d.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::Contract("every d_i must be positive".into()));
        }
        for i in 0..p {
            if a[(i, i)] != 0.0 {
                return Err(Error::Contract("A must have an exactly zero diagonal".into()));
            }
            for j in 0..i {
                if a[(i, j)] != a[(j, i)] {
                    return Err(Error::Contract("A must be symmetric".into()));
                }
            }
        }
        Ok(TransformedData { w, d, a, d0: sigma2.recip(), sigma2, n: 0, y_norm2: 0.0, a_norm: OnceLock::new() })
    }

    pub fn p(&self) -> usize {
        self.w.len()
    }

    /// Operator norm of `A`, computed once.
    pub fn a_op_norm(&self) -> f64 {
        *self.a_norm.get_or_init(|| {
            if self.p() == 0 {
                return 0.0;
            }
            let eig = self.a.clone().symmetric_eigenvalues();
            eig.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
        })
    }

    /// `σ⁻²XᵀX = Diag(d) − A`.
    pub fn precision(&self) -> DMatrix<f64> {
        let mut g = -self.a.clone();
        for i in 0..self.p() {
            g[(i, i)] = self.d[i];
        }
        g
    }
}

/// Transformed data at the instance's own `σ²`.
pub fn transform(inst: &RegressionInstance) -> TransformedData {
    transform_with(inst, inst.sigma2)
}

/// Transformed data at a supplied `σ²` (e.g. the plug-in estimate).
pub fn transform_with(inst: &RegressionInstance, sigma2: f64) -> TransformedData {
    let gram = inst.design.gram();
    let p = inst.p();
    let w = inst.x().tr_mul(&inst.y) / sigma2;
    let d = DVector::from_iterator(p, (0..p).map(|i| gram[(i, i)] / sigma2));
    let mut a = -gram / sigma2;
    for i in 0..p {
        a[(i, i)] = 0.0;
    }
    TransformedData {
        w,
        d,
        a,
        d0: sigma2.recip(),
        sigma2,
        n: inst.n(),
        y_norm2: inst.y.norm_squared(),
        a_norm: OnceLock::new(),
    }
}

/// Residual mean square `yᵀ(I − X(XᵀX)⁻¹Xᵀ)y / (n − p)`.
pub fn estimate_sigma2(inst: &RegressionInstance) -> Result<f64> {
    let (n, p) = (inst.n(), inst.p());
    if n <= p {
        return Err(Error::Config(format!("σ² estimate needs n > p, got n={n}, p={p}")));
    }
    let chol = inst
        .design
        .gram()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::LinearAlgebra("XᵀX is singular".into()))?;
    let beta_hat = chol.solve(&inst.x().tr_mul(&inst.y));
    let resid = &inst.y - inst.x() * beta_hat;
    Ok(resid.norm_squared() / (n - p) as f64)
}

#[cfg(feature = "harness")]
mod bundle {
    use std::fs;
    use std::path::Path;

    use super::*;

    #[derive(Serialize, Deserialize)]
    struct BundleMeta {
        n: usize,
        p: usize,
        sigma2: f64,
    }

    fn write_matrix(path: &Path, m: &DMatrix<f64>, header: &[String]) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path).map_err(csv_err)?;
        wtr.write_record(header).map_err(csv_err)?;
        for r in 0..m.nrows() {
            wtr.write_record(m.row(r).iter().map(|v| v.to_string())).map_err(csv_err)?;
        }
        wtr.flush()?;
        Ok(())
    }

    fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
        let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
        let cols = rdr.headers().map_err(csv_err)?.len();
        let mut data = Vec::new();
        let mut rows = 0;
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            for field in rec.iter() {
                data.push(field.trim().parse::<f64>().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?);
            }
            rows += 1;
        }
        Ok(DMatrix::from_row_slice(rows, cols, &data))
    }

    fn csv_err(e: csv::Error) -> Error {
        Error::Config(format!("CSV: {e}"))
    }

    /// Write `X.csv`, `y.csv`, `beta.csv` and `meta.json` into `dir`.
    pub fn export_bundle(inst: &RegressionInstance, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let xh: Vec<String> = (1..=inst.p()).map(|j| format!("x{j}")).collect();
        write_matrix(&dir.join("X.csv"), inst.x(), &xh)?;
        write_matrix(&dir.join("y.csv"), &DMatrix::from_column_slice(inst.n(), 1, inst.y.as_slice()), &["y".into()])?;
        write_matrix(
            &dir.join("beta.csv"),
            &DMatrix::from_column_slice(inst.p(), 1, inst.beta_star.as_slice()),
            &["beta".into()],
        )?;
        let meta = BundleMeta { n: inst.n(), p: inst.p(), sigma2: inst.sigma2 };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    /// Read a bundle written by [`export_bundle`]. `beta.csv` is optional;
    /// without it the true coefficients are NaN.
    pub fn import_bundle(dir: &Path) -> Result<RegressionInstance> {
        let meta: BundleMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        let x = read_matrix(&dir.join("X.csv"))?;
        let y = read_matrix(&dir.join("y.csv"))?;
        let beta_path = dir.join("beta.csv");
        let beta = if beta_path.exists() { read_matrix(&beta_path)? } else { DMatrix::from_element(meta.p, 1, f64::NAN) };
        if x.nrows() != meta.n || x.ncols() != meta.p || y.nrows() != meta.n || beta.nrows() != meta.p {
            return Err(Error::Config(format!("bundle in {} has inconsistent shapes", dir.display())));
        }
        Ok(RegressionInstance {
            design: Arc::new(Design::new(x)),
            y: y.column(0).into_owned(),
            beta_star: beta.column(0).into_owned(),
            sigma2: meta.sigma2,
        })
    }
}

#[cfg(feature = "harness")]
pub use bundle::{export_bundle, import_bundle};
