//! Browser bindings for a few `mfeb` computations. Each entry point returns a
//! JSON string; the plain functions are usable natively as well.

use mfeb::asymptotics::bundle;
use mfeb::design::{gen_instance, transform};
use mfeb::estimators::{fit_veb, veb_objective};
use mfeb::optimize::OptimOptions;
use mfeb::priors::tilt_moments;
use mfeb::rng::seeded;
use mfeb::{FamilyId, PriorFamily, TiltParams};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MAX_POINTS: usize = 400;
const MAX_ENTRIES: usize = 4_000_000;

fn family(name: &str, theta: &[f64]) -> Result<PriorFamily, String> {
    let id = FamilyId::parse(name).map_err(|e| e.to_string())?;
    PriorFamily::new(id, theta).map_err(|e| e.to_string())
}

fn grid(start: f64, stop: f64, points: usize) -> Result<Vec<f64>, String> {
    if !(2..=MAX_POINTS).contains(&points) {
        return Err(format!("points must lie in 2..={MAX_POINTS}, got {points}"));
    }
    if !(start.is_finite() && stop.is_finite() && start < stop) {
        return Err(format!("need a finite range with start < stop, got {start}..{stop}"));
    }
    let h = (stop - start) / (points - 1) as f64;
    Ok((0..points).map(|i| start + i as f64 * h).collect())
}

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct AsymptoticPoint {
    theta: f64,
    v: f64,
    kappa: f64,
    j: f64,
    upsilon: f64,
}

/// `V`, `κ`, `J` and `υ` along coordinate `coord` of `θ`, other coordinates held at `theta`.
pub fn asymptotic_curve(
    name: &str,
    theta: &[f64],
    coord: usize,
    start: f64,
    stop: f64,
    points: usize,
    sigma2: f64,
) -> Result<String, String> {
    let base = family(name, theta)?;
    if coord >= base.k() {
        return Err(format!("coordinate {coord} out of range for {}", base.id()));
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(format!("σ² must be positive, got {sigma2}"));
    }
    let mut out = Vec::new();
    for x in grid(start, stop, points)? {
        let mut th = theta.to_vec();
        th[coord] = x;
        let b = base.at(&th).and_then(|f| bundle(&f, 1.0 / sigma2)).map_err(|e| e.to_string())?;
        out.push(AsymptoticPoint {
            theta: x,
            v: b.v[(coord, coord)],
            kappa: b.kappa[coord],
            j: b.j[coord],
            upsilon: b.upsilon,
        });
    }
    to_json(&out)
}

#[derive(Serialize)]
struct TiltPoint {
    t: f64,
    log_normalizer: f64,
    mean: f64,
    variance: f64,
}

/// Log normalizer, mean and variance of the tilted prior over a range of `t`.
pub fn tilt_curve(name: &str, theta: &[f64], d: f64, start: f64, stop: f64, points: usize) -> Result<String, String> {
    let fam = family(name, theta)?;
    let mut out = Vec::new();
    for t in grid(start, stop, points)? {
        let m = tilt_moments(&fam, TiltParams::new(t, d)).map_err(|e| e.to_string())?;
        out.push(TiltPoint { t, log_normalizer: m.log_normalizer, mean: m.mean, variance: m.variance });
    }
    to_json(&out)
}

#[derive(Serialize)]
struct Profile {
    theta_hat: Vec<f64>,
    converged: bool,
    grid: Vec<f64>,
    objective: Vec<f64>,
}

/// Simulates one regression instance from `theta0` and profiles the vEB
/// objective along the first coordinate of `θ`.
pub fn veb_profile(name: &str, theta0: &[f64], n: usize, p: usize, seed: u64, points: usize) -> Result<String, String> {
    let fam = family(name, theta0)?;
    if n == 0 || p == 0 || n.saturating_mul(p) > MAX_ENTRIES {
        return Err(format!("need n, p ≥ 1 and n·p ≤ {MAX_ENTRIES}, got n={n}, p={p}"));
    }
    let inst = gen_instance(&fam, n, p, 1.0, &mut seeded(seed)).map_err(|e| e.to_string())?;
    let td = transform(&inst);
    let fit = fit_veb(&td, &fam, &OptimOptions::default()).map_err(|e| e.to_string())?;
    let bounds = fam.optimizer_box()[0];
    let xs = grid(bounds[0], bounds[1], points)?;
    let mut objective = Vec::with_capacity(xs.len());
    for &x in &xs {
        let mut th = fit.theta_hat.clone();
        th[0] = x;
        if fam.id().ordered() && th.len() > 1 && th[0] > th[1] {
            objective.push(f64::NAN);
            continue;
        }
        objective.push(veb_objective(&td, &fam, &th).map_err(|e| e.to_string())?);
    }
    to_json(&Profile { theta_hat: fit.theta_hat, converged: fit.converged, grid: xs, objective })
}

#[wasm_bindgen(js_name = asymptoticCurve)]
pub fn asymptotic_curve_js(
    family: &str,
    theta: Vec<f64>,
    coord: usize,
    start: f64,
    stop: f64,
    points: usize,
    sigma2: f64,
) -> Result<String, JsValue> {
    asymptotic_curve(family, &theta, coord, start, stop, points, sigma2).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = tiltCurve)]
pub fn tilt_curve_js(family: &str, theta: Vec<f64>, d: f64, start: f64, stop: f64, points: usize) -> Result<String, JsValue> {
    tilt_curve(family, &theta, d, start, stop, points).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = vebProfile)]
pub fn veb_profile_js(family: &str, theta0: Vec<f64>, n: usize, p: usize, seed: u64, points: usize) -> Result<String, JsValue> {
    veb_profile(family, &theta0, n, p, seed, points).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn parse(s: &str) -> Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn gaussian_curve_is_flat() {
        let v = parse(&asymptotic_curve("gaussian_mean", &[0.0], 0, -1.0, 1.0, 5, 1.0).unwrap());
        let rows = v.as_array().unwrap();
        assert_eq!(rows.len(), 5);
        for r in rows {
            assert!((r["v"].as_f64().unwrap() - 0.5).abs() < 1e-9);
            assert_eq!(r["kappa"].as_f64().unwrap(), 0.0);
        }
    }

    #[test]
    fn bernoulli_tilt_mean_is_logistic() {
        let v = parse(&tilt_curve("bernoulli", &[0.5], 1.0, -2.0, 2.0, 9).unwrap());
        for r in v.as_array().unwrap() {
            let t = r["t"].as_f64().unwrap();
            let want = 1.0 / (1.0 + (-(t - 0.5)).exp());
            assert!((r["mean"].as_f64().unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn profile_peaks_at_the_fit() {
        let v = parse(&veb_profile("bernoulli", &[0.3], 400, 40, 2, 101).unwrap());
        let hat = v["theta_hat"][0].as_f64().unwrap();
        let grid: Vec<f64> = v["grid"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        let obj: Vec<f64> = v["objective"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap_or(f64::NAN)).collect();
        let best = obj.iter().enumerate().filter(|(_, o)| o.is_finite()).max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert!((grid[best] - hat).abs() <= 0.011, "{} vs {hat}", grid[best]);
    }

    #[test]
    fn bad_inputs_are_reported() {
        assert!(tilt_curve("nope", &[0.5], 1.0, 0.0, 1.0, 5).is_err());
        assert!(tilt_curve("bernoulli", &[0.5], 1.0, 1.0, 0.0, 5).is_err());
        assert!(asymptotic_curve("bernoulli", &[0.5], 1, 0.1, 0.9, 5, 1.0).is_err());
        assert!(veb_profile("bernoulli", &[0.5], 100_000, 1000, 0, 10).is_err());
    }
}
