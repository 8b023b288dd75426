//! Finite-difference stencils and interpolation on periodic grids.

use super::{ScalarField, TimeGrid, TorusGrid, VectorField};
use crate::error::{Error, Result};

pub fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Cell-volume weighted pairing `h^d Σ a_i b_i`.
pub fn inner(grid: &TorusGrid, a: &[f64], b: &[f64]) -> f64 {
    grid.cell_volume() * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

/// Minimal periodic image of a coordinate difference, in `[-1/2, 1/2)`.
#[inline]
pub fn min_image(delta: f64) -> f64 {
    delta - (delta + 0.5).floor()
}

/// Geodesic (flat torus) distance between two points.
pub fn geodesic_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| min_image(a - b).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Central difference `(f_{i+1} - f_{i-1}) / 2h` along `axis`.
pub fn central_diff(grid: &TorusGrid, f: &[f64], axis: usize, out: &mut [f64]) {
    let m = grid.points();
    let stride = grid.stride(axis);
    let scale = 0.5 / grid.spacing();
    let block = stride * m;
    for (fb, ob) in f.chunks(block).zip(out.chunks_mut(block)) {
        for i in 0..m {
            let ip = if i + 1 == m { 0 } else { i + 1 };
            let im = if i == 0 { m - 1 } else { i - 1 };
            let (rp, rm, ro) = (ip * stride, im * stride, i * stride);
            for s in 0..stride {
                ob[ro + s] = (fb[rp + s] - fb[rm + s]) * scale;
            }
        }
    }
}

/// Centered divergence of a component-major vector field; equals `-D^T`
/// for the central gradient `D`.
pub fn central_div(grid: &TorusGrid, field: &[f64], out: &mut [f64]) {
    let n = grid.node_count();
    out.iter_mut().for_each(|v| *v = 0.0);
    let mut tmp = vec![0.0; n];
    for axis in 0..grid.dim() {
        central_diff(grid, &field[axis * n..(axis + 1) * n], axis, &mut tmp);
        for (o, t) in out.iter_mut().zip(&tmp) {
            *o += t;
        }
    }
}

/// Standard `(2d + 1)`-point Laplacian.
pub fn laplacian(grid: &TorusGrid, f: &[f64], out: &mut [f64]) {
    let m = grid.points();
    let inv_h2 = 1.0 / (grid.spacing() * grid.spacing());
    out.iter_mut()
        .zip(f)
        .for_each(|(o, v)| *o = -2.0 * grid.dim() as f64 * v * inv_h2);
    for axis in 0..grid.dim() {
        let stride = grid.stride(axis);
        let block = stride * m;
        for (fb, ob) in f.chunks(block).zip(out.chunks_mut(block)) {
            for i in 0..m {
                let ip = if i + 1 == m { 0 } else { i + 1 };
                let im = if i == 0 { m - 1 } else { i - 1 };
                for s in 0..stride {
                    ob[i * stride + s] += (fb[ip * stride + s] + fb[im * stride + s]) * inv_h2;
                }
            }
        }
    }
}

/// Periodic central-difference gradient of a spatial field (or a field
/// with a single time slice).
pub fn gradient(f: &ScalarField) -> Result<VectorField> {
    if f.time_nodes() != 1 {
        return Err(Error::param(
            "gradient expects a spatial field or a single time slice",
        ));
    }
    if let Some(index) = f.values().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            index,
            value: f.values()[index],
        });
    }
    let grid = *f.grid();
    let n = grid.node_count();
    let mut values = vec![0.0; grid.dim() * n];
    for axis in 0..grid.dim() {
        central_diff(&grid, f.values(), axis, &mut values[axis * n..(axis + 1) * n]);
    }
    VectorField::spatial(grid, values)
}

/// Periodic multilinear interpolation of one spatial slice at `x`.
pub fn interpolate_slice(grid: &TorusGrid, values: &[f64], x: &[f64]) -> f64 {
    let d = grid.dim();
    let m = grid.points();
    let mut base = [0usize; 16];
    let mut frac = [0.0f64; 16];
    debug_assert!(d <= 16);
    for a in 0..d {
        let s = x[a].rem_euclid(1.0) * m as f64;
        let i = s.floor();
        let mut i0 = i as usize;
        let mut t = s - i;
        if i0 >= m {
            i0 = 0;
            t = 0.0;
        }
        base[a] = i0;
        frac[a] = t;
    }
    let mut acc = 0.0;
    for corner in 0..(1usize << d) {
        let mut w = 1.0;
        let mut flat = 0usize;
        for a in 0..d {
            let up = (corner >> (d - 1 - a)) & 1;
            let idx = if up == 1 { (base[a] + 1) % m } else { base[a] };
            w *= if up == 1 { frac[a] } else { 1.0 - frac[a] };
            flat = flat * m + idx;
        }
        if w != 0.0 {
            acc += w * values[flat];
        }
    }
    acc
}

fn time_weights(time: &TimeGrid, t: f64) -> Result<(usize, f64)> {
    time.check_contains(t)?;
    let s = ((t - time.t0()) / time.dt()).clamp(0.0, time.steps() as f64);
    let k = (s.floor() as usize).min(time.steps() - 1);
    Ok((k, s - k as f64))
}

/// Multilinear in space, linear in time. Spatial fields ignore `t`.
pub fn interpolate(f: &ScalarField, t: f64, x: &[f64]) -> Result<f64> {
    let grid = f.grid();
    if x.len() != grid.dim() {
        return Err(Error::shape("query point has wrong dimension"));
    }
    match f.time() {
        None => Ok(interpolate_slice(grid, f.values(), x)),
        Some(time) => {
            let (k, w) = time_weights(time, t)?;
            let a = interpolate_slice(grid, f.slice(k), x);
            if w == 0.0 {
                return Ok(a);
            }
            let b = interpolate_slice(grid, f.slice(k + 1), x);
            Ok((1.0 - w) * a + w * b)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid1(m: usize) -> TorusGrid {
        TorusGrid::new(1, m).unwrap()
    }

    #[test]
    fn gradient_of_constant_vanishes() {
        for m in [8, 16, 33] {
            for d in [1, 2] {
                let g = TorusGrid::new(d, m).unwrap();
                let f = ScalarField::constant(g, 3.0).unwrap();
                assert_eq!(gradient(&f).unwrap().max_norm(), 0.0);
            }
        }
    }

    #[test]
    fn gradient_of_sine_is_second_order() {
        let mut errs = Vec::new();
        for m in [16, 32, 64] {
            let g = grid1(m);
            let f = ScalarField::from_fn(g, |x| (2.0 * PI * x[0]).sin()).unwrap();
            let df = gradient(&f).unwrap();
            let exact = g.sample(|x| 2.0 * PI * (2.0 * PI * x[0]).cos());
            let err = df
                .component(0, 0)
                .iter()
                .zip(&exact)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let h = g.spacing();
            assert!(err <= (2.0 * PI).powi(3) * h * h / 6.0);
            errs.push(err);
        }
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((order - 2.0).abs() < 0.05, "order {order}");
        }
    }

    #[test]
    fn gradient_of_spike_is_antisymmetric() {
        let g = grid1(16);
        let mut v = vec![0.0; 16];
        v[7] = 1.0;
        let df = gradient(&ScalarField::spatial(g, v).unwrap()).unwrap();
        let c = df.component(0, 0);
        assert_eq!(c[6], -c[8]);
        assert!(c[6] != 0.0);
        assert_eq!(c[7], 0.0);
    }

    #[test]
    fn gradient_rejects_time_dependent_fields() {
        let g = grid1(8);
        let t = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let f = ScalarField::space_time(g, t, vec![0.0; 24]).unwrap();
        assert!(gradient(&f).is_err());
    }

    #[test]
    fn laplacian_matches_second_difference() {
        let g = TorusGrid::new(2, 16).unwrap();
        let f = g.sample(|x| (2.0 * PI * x[0]).cos() * (2.0 * PI * x[1]).sin());
        let mut out = vec![0.0; f.len()];
        laplacian(&g, &f, &mut out);
        let h = g.spacing();
        let sym = 2.0 * (4.0 / (h * h)) * (PI * h).sin().powi(2);
        for (o, v) in out.iter().zip(&f) {
            assert!((o + sym * v).abs() < 1e-9);
        }
    }

    #[test]
    fn central_div_is_minus_gradient_transpose() {
        let g = TorusGrid::new(2, 8).unwrap();
        let n = g.node_count();
        let u: Vec<f64> = (0..n).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let c: Vec<f64> = (0..2 * n).map(|i| ((i * 13) % 7) as f64 * 0.3).collect();
        let mut du = vec![0.0; 2 * n];
        for a in 0..2 {
            central_diff(&g, &u, a, &mut du[a * n..(a + 1) * n]);
        }
        let mut divc = vec![0.0; n];
        central_div(&g, &c, &mut divc);
        let lhs: f64 = du.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(&divc).map(|(a, b)| a * b).sum();
        assert!((lhs + rhs).abs() < 1e-9);
    }

    #[test]
    fn interpolation_reproduces_nodes_and_midpoints() {
        let g = grid1(16);
        let f = ScalarField::from_fn(g, |x| x[0]).unwrap();
        for i in 0..16 {
            let x = i as f64 / 16.0;
            assert_eq!(interpolate(&f, 0.0, &[x]).unwrap(), x);
        }
        for i in 0..15 {
            let x = (i as f64 + 0.5) / 16.0;
            let mean = 0.5 * (i as f64 + (i + 1) as f64) / 16.0;
            assert!((interpolate(&f, 0.0, &[x]).unwrap() - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn interpolation_error_bound_for_cosine() {
        use rand::{Rng, SeedableRng};
        let g = grid1(128);
        let f = ScalarField::from_fn(g, |x| (2.0 * PI * x[0]).cos()).unwrap();
        let h = g.spacing();
        let bound = (2.0 * PI).powi(2) * h * h / 8.0;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let x: f64 = rng.random();
            let err = (interpolate(&f, 0.0, &[x]).unwrap() - (2.0 * PI * x).cos()).abs();
            assert!(err <= bound, "err {err} at {x}");
        }
    }

    #[test]
    fn interpolation_in_time_is_linear_and_range_checked() {
        let g = grid1(8);
        let t = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let mut values = vec![0.0; 24];
        values[8..16].iter_mut().for_each(|v| *v = 1.0);
        values[16..].iter_mut().for_each(|v| *v = 3.0);
        let f = ScalarField::space_time(g, t, values).unwrap();
        assert!((interpolate(&f, 0.75, &[0.3]).unwrap() - 2.0).abs() < 1e-14);
        assert_eq!(interpolate(&f, 1.0, &[0.3]).unwrap(), 3.0);
        assert!(matches!(
            interpolate(&f, 1.5, &[0.0]),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn periodic_shift_by_full_period_is_identity() {
        let g = TorusGrid::new(2, 8).unwrap();
        let f = ScalarField::from_fn(g, |x| (x[0] * 7.0).sin() + x[1] * x[1]).unwrap();
        let shifted: Vec<f64> = (0..g.node_count())
            .map(|i| f.values()[g.shift(g.shift(i, 0, 8), 1, -8)])
            .collect();
        let fs = ScalarField::spatial(g, shifted).unwrap();
        assert_eq!(gradient(&f).unwrap(), gradient(&fs).unwrap());
        assert_eq!(
            interpolate(&f, 0.0, &[0.33, 0.71]).unwrap(),
            interpolate(&fs, 0.0, &[0.33, 0.71]).unwrap()
        );
    }

    #[test]
    fn min_image_range() {
        assert_eq!(min_image(0.75), -0.25);
        assert_eq!(min_image(-0.75), 0.25);
        assert_eq!(min_image(0.25), 0.25);
        assert!((geodesic_distance(&[0.05], &[0.95]) - 0.1).abs() < 1e-15);
    }
}
