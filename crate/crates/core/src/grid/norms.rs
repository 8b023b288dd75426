//! Discrete surrogates for Hölder norms and their duals.
//!
//! Both probes are lower bounds of the analytic quantities: the Hölder probe
//! takes a supremum over a finite set of node pairs, the dual probe over a
//! finite dictionary of normalized trigonometric test functions. Growing the
//! pair set or the dictionary can only increase the value.

use super::ops::{geodesic_distance, max_abs};
use super::{ScalarField, TorusGrid};
use crate::error::{Error, Result};
use std::f64::consts::PI;

/// Largest node count for which all pairs are visited.
const ALL_PAIRS_LIMIT: usize = 4096;

/// Frequency cutoff per axis of the dual-norm dictionary.
pub const DEFAULT_DUAL_MAX_FREQ: usize = 8;

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::param(format!("Hölder exponent {alpha} outside (0,1]")));
    }
    Ok(())
}

/// `max_{i<j} |f_i - f_j| / dist(x_i, x_j)^alpha` over nodes `0, stride, 2 stride, ...`.
pub fn holder_seminorm_on(grid: &TorusGrid, values: &[f64], alpha: f64, stride: usize) -> f64 {
    let nodes: Vec<usize> = (0..grid.node_count()).step_by(stride.max(1)).collect();
    let coords: Vec<Vec<f64>> = nodes.iter().map(|&i| grid.coords(i)).collect();
    let mut best = 0.0f64;
    for a in 0..nodes.len() {
        let fa = values[nodes[a]];
        for b in (a + 1)..nodes.len() {
            let dist = geodesic_distance(&coords[a], &coords[b]);
            let q = (fa - values[nodes[b]]).abs() / dist.powf(alpha);
            if q > best {
                best = q;
            }
        }
    }
    best
}

/// Hölder probe with an explicit pair subsampling stride.
pub fn holder_norm_probe_with_stride(f: &ScalarField, alpha: f64, stride: usize) -> Result<f64> {
    check_alpha(alpha)?;
    if !f.is_spatial() {
        return Err(Error::param("Hölder probe expects a spatial field"));
    }
    if stride == 0 {
        return Err(Error::param("stride must be >= 1"));
    }
    Ok(max_abs(f.values()) + holder_seminorm_on(f.grid(), f.values(), alpha, stride))
}

/// `max|f| + [f]_alpha` with all pairs on small grids, stride-subsampled otherwise.
///
/// Accepts `alpha = 1` as the Lipschitz surrogate used by the coupling probes.
pub fn holder_norm_probe(f: &ScalarField, alpha: f64) -> Result<f64> {
    let n = f.grid().node_count();
    let stride = n.div_ceil(ALL_PAIRS_LIMIT).max(1);
    holder_norm_probe_with_stride(f, alpha, stride)
}

/// Complete homogeneous symmetric polynomial `h_j(xs)`.
fn complete_homogeneous(xs: &[f64], j: usize) -> f64 {
    let mut h = vec![0.0; j + 1];
    h[0] = 1.0;
    for &x in xs {
        for deg in 1..=j {
            h[deg] += x * h[deg - 1];
        }
    }
    h[j]
}

/// Discrete `C^{k+alpha}` norm of `cos(2π n·x + φ)` as used by the dual probe.
pub fn trig_test_norm(freq: &[i64], k: usize, alpha: f64) -> f64 {
    let abs: Vec<f64> = freq.iter().map(|&n| (2.0 * PI) * n.unsigned_abs() as f64).collect();
    let mut norm: f64 = (0..=k).map(|j| complete_homogeneous(&abs, j)).sum();
    let len = freq.iter().map(|&n| (n * n) as f64).sum::<f64>().sqrt();
    // sup over displacements parallel to the frequency vector
    let samples = 4096;
    let mut holder = 0.0f64;
    for s in 1..=samples {
        let r = 0.5 * s as f64 / samples as f64;
        let q = 2.0 * (PI * len * r).sin().abs() / r.powf(alpha);
        holder = holder.max(q);
    }
    norm += complete_homogeneous(&abs, k) * holder;
    norm
}

fn dictionary(dim: usize, max_freq: usize) -> Vec<Vec<i64>> {
    let width = 2 * max_freq as i64 + 1;
    let total = (width as usize).pow(dim as u32);
    let mut out = Vec::new();
    for code in 0..total {
        let mut c = code;
        let mut n = vec![0i64; dim];
        for a in (0..dim).rev() {
            n[a] = (c % width as usize) as i64 - max_freq as i64;
            c /= width as usize;
        }
        // keep one representative of each ±n pair
        match n.iter().find(|&&v| v != 0) {
            Some(&first) if first > 0 => out.push(n),
            _ => {}
        }
    }
    out
}

/// Dual-norm probe with an explicit dictionary cutoff.
pub fn dual_norm_probe_with(rho: &ScalarField, k: usize, alpha: f64, max_freq: usize) -> Result<f64> {
    check_alpha(alpha)?;
    if !(1..=4).contains(&k) {
        return Err(Error::param(format!("dual order k={k} outside 1..=4")));
    }
    if !rho.is_spatial() {
        return Err(Error::param("dual probe expects a spatial field"));
    }
    let grid = rho.grid();
    let freqs = dictionary(grid.dim(), max_freq);
    if freqs.is_empty() {
        return Err(Error::Config("dual-norm dictionary is empty".into()));
    }
    let vol = grid.cell_volume();
    let coords: Vec<Vec<f64>> = (0..grid.node_count()).map(|i| grid.coords(i)).collect();
    let mut best = 0.0f64;
    for n in &freqs {
        let norm = trig_test_norm(n, k, alpha);
        let (mut c, mut s) = (0.0, 0.0);
        for (x, r) in coords.iter().zip(rho.values()) {
            let phase = 2.0 * PI * n.iter().zip(x).map(|(&a, b)| a as f64 * b).sum::<f64>();
            c += r * phase.cos();
            s += r * phase.sin();
        }
        best = best.max(vol * c.abs() / norm).max(vol * s.abs() / norm);
    }
    Ok(best)
}

/// Supremum of `|<rho, u>|` over trigonometric `u` with `||u||_{k+alpha} = 1`.
pub fn dual_norm_probe(rho: &ScalarField, k: usize, alpha: f64) -> Result<f64> {
    dual_norm_probe_with(rho, k, alpha, DEFAULT_DUAL_MAX_FREQ)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holder_probe_of_constant_is_its_magnitude() {
        let g = TorusGrid::new(1, 32).unwrap();
        let f = ScalarField::constant(g, -2.5).unwrap();
        assert_eq!(holder_norm_probe(&f, 0.5).unwrap(), 2.5);
    }

    #[test]
    fn holder_probe_is_positively_homogeneous() {
        let g = TorusGrid::new(1, 64).unwrap();
        let f = ScalarField::from_fn(g, |x| (2.0 * PI * x[0]).sin() + 0.2).unwrap();
        let a = holder_norm_probe(&f, 0.4).unwrap();
        let b = holder_norm_probe(&f.scaled(2.0), 0.4).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn holder_probe_matches_dense_oracle() {
        let g = TorusGrid::new(1, 64).unwrap();
        let f = ScalarField::from_fn(g, |x| (2.0 * PI * x[0]).cos()).unwrap();
        let probe = holder_norm_probe(&f, 0.5).unwrap();
        // dense oracle on 10^4 points, all pairs
        let n = 10_000;
        let vals: Vec<f64> = (0..n).map(|i| (2.0 * PI * i as f64 / n as f64).cos()).collect();
        let mut semi = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                let d = (j - i) as f64 / n as f64;
                let d = d.min(1.0 - d);
                semi = semi.max((vals[i] - vals[j]).abs() / d.sqrt());
            }
        }
        let exact = 1.0 + semi;
        assert!(((probe - exact) / exact).abs() < 0.02, "{probe} vs {exact}");
    }

    #[test]
    fn holder_probe_grows_with_pair_set() {
        let g = TorusGrid::new(2, 16).unwrap();
        let f = ScalarField::from_fn(g, |x| (2.0 * PI * (x[0] + 2.0 * x[1])).sin()).unwrap();
        let coarse = holder_norm_probe_with_stride(&f, 0.5, 4).unwrap();
        let fine = holder_norm_probe_with_stride(&f, 0.5, 1).unwrap();
        assert!(fine >= coarse);
        assert!(fine >= f.max_abs());
    }

    #[test]
    fn holder_probe_rejects_bad_alpha() {
        let g = TorusGrid::new(1, 8).unwrap();
        let f = ScalarField::constant(g, 1.0).unwrap();
        assert!(holder_norm_probe(&f, 0.0).is_err());
        assert!(holder_norm_probe(&f, 1.5).is_err());
    }

    #[test]
    fn dual_probe_vanishes_on_zero_and_differences() {
        let g = TorusGrid::new(1, 32).unwrap();
        let f = ScalarField::from_fn(g, |x| 1.0 + (2.0 * PI * x[0]).sin()).unwrap();
        let zero = f.combine(1.0, &f, -1.0).unwrap();
        assert_eq!(dual_norm_probe(&zero, 2, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn dual_probe_picks_matching_mode() {
        let g = TorusGrid::new(1, 64).unwrap();
        let rho = ScalarField::from_fn(g, |x| (2.0 * PI * x[0]).cos()).unwrap();
        let probe = dual_norm_probe(&rho, 1, 0.5).unwrap();
        let expected = 0.5 / trig_test_norm(&[1], 1, 0.5);
        assert!((probe - expected).abs() < 1e-12, "{probe} vs {expected}");
    }

    #[test]
    fn dual_probe_monotone_in_dictionary_and_bounded() {
        let g = TorusGrid::new(1, 64).unwrap();
        let rho = ScalarField::from_fn(g, |x| (x[0] - 0.3).abs() - 0.25).unwrap();
        let mut last = 0.0;
        for kmax in 1..=8 {
            let p = dual_norm_probe_with(&rho, 2, 0.5, kmax).unwrap();
            assert!(p >= last);
            last = p;
        }
        let l1: f64 = rho.values().iter().map(|v| v.abs()).sum::<f64>() * g.cell_volume();
        assert!(last <= l1 / trig_test_norm(&[1], 2, 0.5) + 1e-15);
        assert!(matches!(
            dual_norm_probe_with(&rho, 2, 0.5, 0),
            Err(Error::Config(_))
        ));
    }
}
