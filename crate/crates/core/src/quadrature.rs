//! Gauss–Hermite and Gauss–Legendre rules.
//!
//! Rules are computed once per node count by Newton iteration on the
//! orthogonal-polynomial recurrences and cached for the life of the process.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

/// Nodes and weights of a one-dimensional quadrature rule.
#[derive(Debug, Clone)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

type Cache = Mutex<HashMap<usize, &'static Rule>>;

fn cached(cache: &'static OnceLock<Cache>, n: usize, build: fn(usize) -> Rule) -> &'static Rule {
    let map = cache.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = map.lock().expect("quadrature cache poisoned");
    guard.entry(n).or_insert_with(|| Box::leak(Box::new(build(n))))
}

/// Physicists' Gauss–Hermite rule: `∫ e^{-x²} f(x) dx ≈ Σ wᵢ f(xᵢ)`.
pub fn gauss_hermite(n: usize) -> &'static Rule {
    static CACHE: OnceLock<Cache> = OnceLock::new();
    cached(&CACHE, n, build_hermite)
}

/// Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> &'static Rule {
    static CACHE: OnceLock<Cache> = OnceLock::new();
    cached(&CACHE, n, build_legendre)
}

fn build_hermite(n: usize) -> Rule {
    assert!(n >= 1, "Gauss–Hermite rule needs at least one node");
    const PIM4: f64 = 0.751_125_544_464_942_5; // π^{-1/4}
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0_f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-14 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    Rule { nodes: x, weights: w }
}

fn build_legendre(n: usize) -> Rule {
    assert!(n >= 1, "Gauss–Legendre rule needs at least one node");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    for i in 1..=m {
        let mut z = (std::f64::consts::PI * (i as f64 - 0.25) / (nf + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf - 1.0) * z * p2 - (jf - 1.0) * p3) / jf;
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 3e-16 {
                break;
            }
        }
        x[i - 1] = -z;
        x[n - i] = z;
        w[i - 1] = 2.0 / ((1.0 - z * z) * pp * pp);
        w[n - i] = w[i - 1];
    }
    Rule { nodes: x, weights: w }
}

/// Probability nodes `(weight, point)` representing `N(mean, var)` with an `n`-point rule.
pub fn normal_nodes(mean: f64, var: f64, n: usize) -> impl Iterator<Item = (f64, f64)> {
    let rule = gauss_hermite(n);
    let scale = (2.0 * var).sqrt();
    let norm = std::f64::consts::PI.sqrt().recip();
    rule.nodes
        .iter()
        .zip(&rule.weights)
        .map(move |(&x, &w)| (w * norm, mean + scale * x))
}

/// Probability nodes for `N(mean, var)` from composite Gauss–Legendre on
/// `mean ± 10 sd`, with `per_panel` nodes and panels no wider than `max_width`.
pub fn normal_nodes_composite(mean: f64, var: f64, per_panel: usize, max_width: f64) -> Vec<(f64, f64)> {
    let rule = gauss_legendre(per_panel);
    let sd = var.sqrt();
    let (lo, hi) = (mean - 10.0 * sd, mean + 10.0 * sd);
    let panels = ((hi - lo) / max_width).ceil().max(1.0) as usize;
    let h = (hi - lo) / panels as f64;
    let norm = (2.0 * std::f64::consts::PI * var).sqrt().recip();
    let mut out = Vec::with_capacity(panels * per_panel);
    for j in 0..panels {
        let mid = lo + (j as f64 + 0.5) * h;
        for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
            let t = mid + 0.5 * h * x;
            let z = (t - mean) / sd;
            out.push((0.5 * h * w * norm * (-0.5 * z * z).exp(), t));
        }
    }
    out
}
