//! Box-constrained maximization: projected BFGS, golden section, multi-start.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimOptions {
    pub max_iter: usize,
    /// Tolerance on the projected-gradient norm.
    pub tol: f64,
    pub starts: usize,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions { max_iter: 500, tol: 1e-8, starts: 5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub pg_norm: f64,
}

/// Feasible region: a box, optionally intersected with `x₀ ≤ x₁`.
#[derive(Debug, Clone, PartialEq)]
pub struct Feasible {
    pub bounds: Vec<[f64; 2]>,
    pub ordered: bool,
}

impl Feasible {
    pub fn boxed(bounds: Vec<[f64; 2]>) -> Self {
        Feasible { bounds, ordered: false }
    }

    pub fn project(&self, x: &mut [f64]) {
        if self.ordered && x.len() >= 2 && x[0] > x[1] {
            let m = 0.5 * (x[0] + x[1]);
            x[0] = m;
            x[1] = m;
        }
        for (v, b) in x.iter_mut().zip(&self.bounds) {
            *v = v.clamp(b[0], b[1]);
        }
        if self.ordered && x.len() >= 2 && x[0] > x[1] {
            // Only possible with non-nested bounds; fall back to the lower value.
            x[0] = x[1];
        }
    }

    pub fn center(&self) -> Vec<f64> {
        let mut c: Vec<f64> = self.bounds.iter().map(|b| 0.5 * (b[0] + b[1])).collect();
        self.project(&mut c);
        c
    }

    /// `‖x − P(x + g)‖` for an ascent gradient `g`.
    fn pg_norm(&self, x: &[f64], g: &[f64]) -> f64 {
        let mut y: Vec<f64> = x.iter().zip(g).map(|(a, b)| a + b).collect();
        self.project(&mut y);
        x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }

    /// Box centre followed by deterministic Latin-hypercube points.
    pub fn starts(&self, count: usize) -> Vec<Vec<f64>> {
        let k = self.bounds.len();
        let mut out = vec![self.center()];
        let m = count.saturating_sub(1);
        for j in 0..m {
            let x: Vec<f64> = (0..k)
                .map(|c| {
                    // Stratum index permuted per coordinate by a fixed affine map.
                    let stride = (2 * c + 1..).find(|&s| gcd(s, m) == 1).unwrap_or(1);
                    let s = (j * stride + c) % m;
                    let u = (s as f64 + 0.5) / m as f64;
                    let b = self.bounds[c];
                    b[0] + u * (b[1] - b[0])
                })
                .collect();
            let mut x = x;
            self.project(&mut x);
            out.push(x);
        }
        out
    }
}

/// Projected BFGS ascent with Armijo backtracking along the projection arc.
///
/// `f` returns the objective and its gradient.
pub fn maximize_bfgs<F>(mut f: F, region: &Feasible, x0: &[f64], opts: &OptimOptions) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let k = x0.len();
    let mut x = x0.to_vec();
    region.project(&mut x);
    let (mut fx, mut g) = f(&x)?;
    let mut h = identity(k);
    let mut pg = region.pg_norm(&x, &g);
    let mut it = 0;
    while it < opts.max_iter && pg > opts.tol {
        it += 1;
        let free: Vec<bool> = (0..k)
            .map(|i| {
                let [lo, hi] = region.bounds[i];
                !((x[i] <= lo && g[i] < 0.0) || (x[i] >= hi && g[i] > 0.0))
            })
            .collect();
        let mut dir = vec![0.0; k];
        for i in 0..k {
            if free[i] {
                dir[i] = (0..k).filter(|&j| free[j]).map(|j| h[i][j] * g[j]).sum();
            }
        }
        if dir.iter().zip(&g).map(|(d, gi)| d * gi).sum::<f64>() <= 0.0 {
            h = identity(k);
            dir = g.iter().zip(&free).map(|(gi, &fr)| if fr { *gi } else { 0.0 }).collect();
        }
        let step = line_search(&mut f, region, &x, fx, &g, &dir)?;
        let (x_new, f_new, g_new) = match step {
            Some(s) => s,
            None => {
                // Fall back to a projected steepest-ascent step.
                h = identity(k);
                match line_search(&mut f, region, &x, fx, &g, &g.clone())? {
                    Some(s) => s,
                    None => break,
                }
            }
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        // Ascent on f is descent on −f; curvature pair for −f.
        let y: Vec<f64> = g.iter().zip(&g_new).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let snorm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ynorm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if sy > 1e-12 * snorm * ynorm {
            bfgs_update(&mut h, &s, &y, sy);
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        pg = region.pg_norm(&x, &g);
        if snorm == 0.0 {
            break;
        }
    }
    Ok(OptimResult { x, value: fx, iterations: it, converged: pg <= opts.tol, pg_norm: pg })
}

type Step = Option<(Vec<f64>, f64, Vec<f64>)>;

fn line_search<F>(f: &mut F, region: &Feasible, x: &[f64], fx: f64, g: &[f64], dir: &[f64]) -> Result<Step>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    const C1: f64 = 1e-4;
    let mut alpha = 1.0;
    for _ in 0..60 {
        let mut xn: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + alpha * d).collect();
        region.project(&mut xn);
        let moved: f64 = xn.iter().zip(x).zip(g).map(|((a, b), gi)| (a - b) * gi).sum();
        if xn.iter().zip(x).all(|(a, b)| a == b) {
            return Ok(None);
        }
        match f(&xn) {
            Ok((fn_, gn)) if fn_.is_finite() && fn_ >= fx + C1 * moved => return Ok(Some((xn, fn_, gn))),
            Ok(_) | Err(Error::Numerical(_)) => {}
            Err(e) => return Err(e),
        }
        alpha *= 0.5;
    }
    Ok(None)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn identity(k: usize) -> Vec<Vec<f64>> {
    (0..k).map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

/// Inverse-Hessian update for the negated objective, `h ← (I − ρsyᵀ)h(I − ρysᵀ) + ρssᵀ`.
fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let k = s.len();
    let rho = sy.recip();
    let hy: Vec<f64> = (0..k).map(|i| (0..k).map(|j| h[i][j] * y[j]).sum()).collect();
    let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    for i in 0..k {
        for j in 0..k {
            h[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

/// Golden-section maximization of a scalar function on `[lo, hi]`.
pub fn golden_section<F>(mut f: F, lo: f64, hi: f64, tol: f64, max_iter: usize) -> Result<OptimResult>
where
    F: FnMut(f64) -> Result<f64>,
{
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    let mut it = 0;
    while (b - a) > tol && it < max_iter {
        it += 1;
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
    }
    let mut best = (fc, c);
    for x in [lo, hi, 0.5 * (a + b)] {
        let v = f(x)?;
        if v > best.0 {
            best = (v, x);
        }
    }
    Ok(OptimResult { x: vec![best.1], value: best.0, iterations: it, converged: (b - a) <= tol, pg_norm: f64::NAN })
}

/// Multi-start projected BFGS, with golden-section fallback for scalar problems
/// whose quasi-Newton runs all fail to converge.
pub fn maximize<F>(mut f: F, region: &Feasible, opts: &OptimOptions) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut best: Option<OptimResult> = None;
    let mut total_iter = 0;
    let mut last_err = None;
    for x0 in region.starts(opts.starts.max(1)) {
        match maximize_bfgs(&mut f, region, &x0, opts) {
            Ok(r) => {
                total_iter += r.iterations;
                let better = match &best {
                    None => true,
                    Some(b) => (r.converged && !b.converged) || (r.converged == b.converged && r.value > b.value),
                };
                if better {
                    best = Some(r);
                }
            }
            Err(e @ Error::Numerical(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    let mut best = match best {
        Some(b) => b,
        None => return Err(last_err.unwrap_or_else(|| Error::Numerical("no optimizer start succeeded".into()))),
    };
    if !best.converged && region.bounds.len() == 1 {
        let [lo, hi] = region.bounds[0];
        let gs = golden_section(|x| f(&[x]).map(|v| v.0), lo, hi, opts.tol, 10 * opts.max_iter)?;
        total_iter += gs.iterations;
        if gs.converged && gs.value >= best.value {
            best = gs;
        }
    }
    best.iterations = total_iter;
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_interior_and_boundary() {
        let region = Feasible::boxed(vec![[-1.0, 1.0], [-1.0, 1.0]]);
        let f = |x: &[f64]| Ok((-(x[0] - 0.3).powi(2) - 2.0 * (x[1] + 0.2).powi(2), vec![-2.0 * (x[0] - 0.3), -4.0 * (x[1] + 0.2)]));
        let r = maximize(f, &region, &OptimOptions::default()).unwrap();
        assert!(r.converged);
        assert!((r.x[0] - 0.3).abs() < 1e-8 && (r.x[1] + 0.2).abs() < 1e-8);
        let g = |x: &[f64]| Ok((-(x[0] - 3.0).powi(2) - (x[1] - 0.5).powi(2), vec![-2.0 * (x[0] - 3.0), -2.0 * (x[1] - 0.5)]));
        let r = maximize(g, &region, &OptimOptions::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.x[0], 1.0);
        assert!((r.x[1] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn ordered_region() {
        let region = Feasible { bounds: vec![[-2.0, 2.0], [-2.0, 2.0]], ordered: true };
        // Unconstrained maximum at (1, −1) violates the order; the answer is on x₀ = x₁.
        let f = |x: &[f64]| Ok((-(x[0] - 1.0).powi(2) - (x[1] + 1.0).powi(2), vec![-2.0 * (x[0] - 1.0), -2.0 * (x[1] + 1.0)]));
        let r = maximize(f, &region, &OptimOptions::default()).unwrap();
        assert!((r.x[0] - r.x[1]).abs() < 1e-8 && r.x[0].abs() < 1e-6, "{:?}", r.x);
        for s in region.starts(5) {
            assert!(s[0] <= s[1]);
        }
    }

    #[test]
    fn golden_section_finds_scalar_max() {
        let r = golden_section(|x| Ok(-(x - 0.123).powi(2)), 0.0, 1.0, 1e-10, 1000).unwrap();
        assert!(r.converged && (r.x[0] - 0.123).abs() < 1e-9);
    }

    #[test]
    fn rosenbrock_in_box() {
        let region = Feasible::boxed(vec![[-2.0, 2.0], [-2.0, 2.0]]);
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            Ok((-v, vec![2.0 * (1.0 - a) + 400.0 * a * (b - a * a), -200.0 * (b - a * a)]))
        };
        let r = maximize(f, &region, &OptimOptions::default()).unwrap();
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
    }
}
