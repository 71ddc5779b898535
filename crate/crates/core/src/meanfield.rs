//! Naive mean-field fixed point `uᵢ = ψ′ᵢ(sᵢ + wᵢ)`, `s = Au`.

use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::design::TransformedData;
use crate::error::{Error, Result};
use crate::priors::{tilt_moments, PriorFamily, TiltParams};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MfInit {
    #[default]
    Naive,
    Zero,
    Given(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub init: MfInit,
}

impl Default for MfOptions {
    fn default() -> Self {
        MfOptions { damping: 0.5, tol: 1e-10, max_iter: 10_000, init: MfInit::Naive }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanFieldSolution {
    pub u: DVector<f64>,
    pub tau2: DVector<f64>,
    /// Local fields `sᵢ = Σ_{j≠i} A_ij u_j`.
    pub s: DVector<f64>,
    pub iterations: usize,
    pub residual: f64,
    /// `maxᵢ ψ″ᵢ · ‖A‖_op` at the solution; below one the map is a contraction.
    pub contraction: f64,
    /// Geometric mean of successive residual ratios.
    pub decay_rate: f64,
}

impl MeanFieldSolution {
    pub fn p(&self) -> usize {
        self.u.len()
    }

    /// `i,u,tau2,s` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "i,u,tau2,s")?;
        for i in 0..self.p() {
            writeln!(out, "{},{},{},{}", i + 1, self.u[i], self.tau2[i], self.s[i])?;
        }
        Ok(())
    }
}

fn coordinate_map(td: &TransformedData, fam: &PriorFamily, field: &DVector<f64>, u: &mut DVector<f64>) -> Result<()> {
    for i in 0..td.p() {
        u[i] = tilt_moments(fam, TiltParams::new(field[i] + td.w[i], td.d[i]))?.mean;
    }
    Ok(())
}

/// `ũᵢ = ψ′ᵢ(wᵢ)`: coordinate-wise tilt means with the local field set to zero.
pub fn naive_init(td: &TransformedData, fam: &PriorFamily) -> Result<DVector<f64>> {
    let mut u = DVector::zeros(td.p());
    coordinate_map(td, fam, &DVector::zeros(td.p()), &mut u)?;
    Ok(u)
}

/// Damped synchronous Picard iteration `u ← (1 − λ)u + λψ′(Au + w)`.
///
/// The damping is halved whenever the sup-norm residual grows.
pub fn solve_fixed_point(td: &TransformedData, fam: &PriorFamily, opts: &MfOptions) -> Result<MeanFieldSolution> {
    let p = td.p();
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::Config(format!("damping must lie in (0, 1], got {}", opts.damping)));
    }
    let mut u = match &opts.init {
        MfInit::Naive => naive_init(td, fam)?,
        MfInit::Zero => DVector::zeros(p),
        MfInit::Given(v) if v.len() == p => DVector::from_column_slice(v),
        MfInit::Given(v) => {
            return Err(Error::Contract(format!("initial point has length {}, expected {p}", v.len())));
        }
    };
    let mut lambda = opts.damping;
    let mut mapped = DVector::zeros(p);
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let field = &td.a * &u;
        coordinate_map(td, fam, &field, &mut mapped)?;
        iterations += 1;
        let residual = (&u - &mapped).amax();
        if !residual.is_finite() {
            return Err(Error::Numerical("mean-field residual is not finite".into()));
        }
        if let Some(&prev) = trace.last() {
            if residual > prev && lambda > 1.0 / 1024.0 {
                lambda *= 0.5;
            }
        }
        trace.push(residual);
        if residual <= opts.tol {
            let s = field;
            let mut tau2 = DVector::zeros(p);
            let mut max_var = 0.0_f64;
            for i in 0..p {
                let m = tilt_moments(fam, TiltParams::new(s[i] + td.w[i], td.d[i]))?;
                tau2[i] = m.variance;
                max_var = max_var.max(m.variance);
            }
            let decay_rate = if trace.len() >= 2 && trace[0] > 0.0 && residual > 0.0 {
                (residual / trace[0]).powf(1.0 / (trace.len() - 1) as f64)
            } else {
                0.0
            };
            return Ok(MeanFieldSolution {
                u,
                tau2,
                s,
                iterations,
                residual,
                contraction: max_var * td.a_op_norm(),
                decay_rate,
            });
        }
        if iterations >= opts.max_iter {
            return Err(Error::NonConvergence { iterations, residual, trace });
        }
        u = &u * (1.0 - lambda) + &mapped * lambda;
    }
}

/// `υ̂ = Σ qᵢ² τᵢ²` for a unit vector `q`.
pub fn upsilon_hat(sol: &MeanFieldSolution, q: &DVector<f64>) -> Result<f64> {
    if q.len() != sol.p() {
        return Err(Error::Contract(format!("q has length {}, expected {}", q.len(), sol.p())));
    }
    if (q.norm_squared() - 1.0).abs() > 1e-12 {
        return Err(Error::Contract(format!("q must have unit norm, got ‖q‖² = {}", q.norm_squared())));
    }
    Ok(q.iter().zip(sol.tau2.iter()).map(|(a, t)| a * a * t).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{gen_instance, transform};
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    #[test]
    fn orthogonal_design_is_solved_by_naive_init() {
        let w = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let td = TransformedData::from_parts(w, DVector::from_element(3, 1.0), DMatrix::zeros(3, 3), 1.0).unwrap();
        let fam = PriorFamily::spike_slab(0.4, 1.3);
        let sol = solve_fixed_point(&td, &fam, &MfOptions::default()).unwrap();
        assert_eq!(sol.iterations, 1);
        assert_eq!(sol.u, naive_init(&td, &fam).unwrap());
    }

    #[test]
    fn bernoulli_naive_value() {
        let td = TransformedData::from_parts(DVector::zeros(1), DVector::from_element(1, 1.0), DMatrix::zeros(1, 1), 1.0)
            .unwrap();
        let u = naive_init(&td, &PriorFamily::bernoulli(0.5)).unwrap();
        let e = (-0.5f64).exp();
        assert_abs_diff_eq!(u[0], e / (1.0 + e), epsilon = 1e-15);
    }

    #[test]
    fn gaussian_fixed_point_is_a_linear_solve() {
        // uᵢ = (sᵢ + wᵢ + θ)/(dᵢ + 1) ⇔ (Diag(d + 1) − A)u = w + θ1.
        let inst = gen_instance(&PriorFamily::gaussian_mean(0.5), 400, 20, 1.0, &mut seeded(9)).unwrap();
        let td = transform(&inst);
        let theta = 0.5;
        let sol = solve_fixed_point(&td, &PriorFamily::gaussian_mean(theta), &MfOptions::default()).unwrap();
        let mut m = -td.a.clone();
        for i in 0..20 {
            m[(i, i)] = td.d[i] + 1.0;
        }
        let rhs = td.w.map(|x| x + theta);
        let exact = m.lu().solve(&rhs).unwrap();
        assert!((&sol.u - exact).amax() < 1e-8);
        assert!(sol.contraction < 1.0);
    }

    #[test]
    fn upsilon_hat_checks() {
        let sol = MeanFieldSolution {
            u: DVector::zeros(3),
            tau2: DVector::from_vec(vec![0.2, 0.5, 0.9]),
            s: DVector::zeros(3),
            iterations: 0,
            residual: 0.0,
            contraction: 0.0,
            decay_rate: 0.0,
        };
        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        assert_eq!(upsilon_hat(&sol, &e1).unwrap(), 0.2);
        assert!(matches!(upsilon_hat(&sol, &(e1 * 2.0)), Err(Error::Contract(_))));
    }

    #[test]
    fn strong_coupling_surfaces_non_convergence() {
        let mut a = DMatrix::from_element(2, 2, 50.0);
        a[(0, 0)] = 0.0;
        a[(1, 1)] = 0.0;
        let td = TransformedData::from_parts(DVector::from_vec(vec![1.0, 0.0]), DVector::from_element(2, 1.0), a, 1.0)
            .unwrap();
        let opts = MfOptions { max_iter: 50, ..MfOptions::default() };
        let r = solve_fixed_point(&td, &PriorFamily::gaussian_mean(0.0), &opts);
        assert!(matches!(r, Err(Error::NonConvergence { .. })), "{r:?}");
    }
}
