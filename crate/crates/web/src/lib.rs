//! Browser bindings: the mollified coupling, local versus mollified MFG
//! values, and circle W1 distances.

use mfglab::coupling::{default_problem, MollifiedCoupling, Profile};
use mfglab::grid::TorusGrid;
use mfglab::measures::{sample, w1_circle, DensityField, EmpiricalMeasure};
use mfglab::mfg::{CouplingKind, MfgSystem};
use std::f64::consts::PI;
use wasm_bindgen::prelude::*;

fn cosine_density(grid: TorusGrid, amplitude: f64) -> mfglab::Result<DensityField> {
    DensityField::from_fn(grid, |x| 1.0 + amplitude * (2.0 * PI * x[0]).cos())
}

/// `[F(x, m), F^ε(x, m)]` for `m = 1 + amplitude cos 2πx`, concatenated.
pub fn coupling_profile_values(points: usize, epsilon: f64, amplitude: f64) -> mfglab::Result<Vec<f64>> {
    let grid = TorusGrid::new(1, points)?;
    let (_, f) = default_problem(Profile::Default);
    let m = cosine_density(grid, amplitude)?;
    let mut out = f.apply(&grid, m.values());
    out.extend(MollifiedCoupling::with_epsilon(f, grid, epsilon)?.apply(m.values()));
    Ok(out)
}

/// `[u(0), u^ε(0), m(T), m^ε(T), iterations, iterations^ε]` for the
/// default problem started from `1 + 0.5 cos 2πx`.
pub fn mfg_compare_values(points: usize, steps: usize, horizon: f64, epsilon: f64) -> mfglab::Result<Vec<f64>> {
    let (h, f) = default_problem(Profile::Default);
    let grid = TorusGrid::new(1, points)?;
    let sys = MfgSystem::new(h, f, grid, horizon, steps)?;
    let m0 = cosine_density(grid, 0.5)?;
    let local = sys.solve(0.0, &m0, CouplingKind::Local)?;
    let moll = sys.solve(0.0, &m0, CouplingKind::Mollified(epsilon))?;
    let k = local.time().steps();
    let mut out = Vec::with_capacity(4 * points + 2);
    out.extend_from_slice(local.u.slice(0));
    out.extend_from_slice(moll.u.slice(0));
    out.extend_from_slice(local.m.slice(k));
    out.extend_from_slice(moll.m.slice(k));
    out.push(local.iterations as f64);
    out.push(moll.iterations as f64);
    Ok(out)
}

/// W1 between `count` draws from `1 + amplitude cos 2πx` and the law.
pub fn sample_w1_value(count: usize, amplitude: f64, seed: u64) -> mfglab::Result<f64> {
    let m = cosine_density(TorusGrid::new(1, 256)?, amplitude)?;
    let atoms = EmpiricalMeasure::from_points(sample(&m, count, seed)?)?;
    w1_circle(&atoms, &m)
}

/// W1 between two atom lists on the circle.
pub fn atoms_w1_value(a: &[f64], b: &[f64]) -> mfglab::Result<f64> {
    let lift = |v: &[f64]| EmpiricalMeasure::from_points(v.iter().map(|x| vec![*x]).collect());
    w1_circle(&lift(a)?, &lift(b)?)
}

fn js(e: mfglab::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn coupling_profile(points: usize, epsilon: f64, amplitude: f64) -> Result<Vec<f64>, JsError> {
    coupling_profile_values(points, epsilon, amplitude).map_err(js)
}

#[wasm_bindgen]
pub fn mfg_compare(points: usize, steps: usize, horizon: f64, epsilon: f64) -> Result<Vec<f64>, JsError> {
    mfg_compare_values(points, steps, horizon, epsilon).map_err(js)
}

#[wasm_bindgen]
pub fn sample_w1(count: usize, amplitude: f64, seed: u64) -> Result<f64, JsError> {
    sample_w1_value(count, amplitude, seed).map_err(js)
}

#[wasm_bindgen]
pub fn atoms_w1(a: &[f64], b: &[f64]) -> Result<f64, JsError> {
    atoms_w1_value(a, b).map_err(js)
}
