//! Multidimensional periodic FFTs, the implicit heat step and circular
//! convolution on a `TorusGrid`.

use crate::grid::TorusGrid;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::f64::consts::PI;
use std::sync::Arc;

/// Forward/inverse FFT over every axis of a torus grid.
#[derive(Clone)]
pub struct TorusFft {
    grid: TorusGrid,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for TorusFft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TorusFft").field("grid", &self.grid).finish()
    }
}

impl TorusFft {
    pub fn new(grid: TorusGrid) -> Self {
        let mut planner = FftPlanner::new();
        let m = grid.points();
        Self {
            grid,
            forward: planner.plan_fft_forward(m),
            inverse: planner.plan_fft_inverse(m),
        }
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    fn transform(&self, data: &mut [Complex64], fft: &Arc<dyn Fft<f64>>) {
        let m = self.grid.points();
        let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        // the last axis is contiguous: one batched call
        fft.process_with_scratch(data, &mut scratch);
        if self.grid.dim() == 1 {
            return;
        }
        // remaining axes: gather a batch of lines, transform, scatter
        let mut lines = Vec::new();
        for axis in 0..self.grid.dim() - 1 {
            let stride = self.grid.stride(axis);
            let block = stride * m;
            let batch = stride.min(256);
            lines.resize(batch * m, Complex64::default());
            for chunk in data.chunks_mut(block) {
                let mut s0 = 0;
                while s0 < stride {
                    let count = batch.min(stride - s0);
                    for b in 0..count {
                        for i in 0..m {
                            lines[b * m + i] = chunk[i * stride + s0 + b];
                        }
                    }
                    fft.process_with_scratch(&mut lines[..count * m], &mut scratch);
                    for b in 0..count {
                        for i in 0..m {
                            chunk[i * stride + s0 + b] = lines[b * m + i];
                        }
                    }
                    s0 += count;
                }
            }
        }
    }

    /// Unnormalized forward transform in place.
    pub fn forward(&self, data: &mut [Complex64]) {
        self.transform(data, &self.forward);
    }

    /// Inverse transform in place, normalized so `inverse(forward(f)) = f`.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.transform(data, &self.inverse);
        let scale = 1.0 / self.grid.node_count() as f64;
        data.iter_mut().for_each(|c| *c *= scale);
    }

    /// Applies a real diagonal multiplier in Fourier space to two real
    /// fields at once (packed as real and imaginary parts).
    fn apply_real_symbol(&self, symbol: &[f64], a: &mut [f64], b: Option<&mut [f64]>) {
        let mut buf: Vec<Complex64> = match &b {
            Some(b) => a.iter().zip(b.iter()).map(|(&x, &y)| Complex64::new(x, y)).collect(),
            None => a.iter().map(|&x| Complex64::new(x, 0.0)).collect(),
        };
        self.forward(&mut buf);
        for (c, s) in buf.iter_mut().zip(symbol) {
            *c *= *s;
        }
        self.inverse(&mut buf);
        for (x, c) in a.iter_mut().zip(&buf) {
            *x = c.re;
        }
        if let Some(b) = b {
            for (y, c) in b.iter_mut().zip(&buf) {
                *y = c.im;
            }
        }
    }
}

/// Eigenvalues of the discrete Laplacian `-Δ_h` in FFT order.
pub fn laplacian_symbol(grid: &TorusGrid) -> Vec<f64> {
    let m = grid.points();
    let h = grid.spacing();
    let per_axis: Vec<f64> = (0..m)
        .map(|k| 4.0 / (h * h) * (PI * k as f64 / m as f64).sin().powi(2))
        .collect();
    (0..grid.node_count())
        .map(|flat| (0..grid.dim()).map(|a| per_axis[grid.axis_index(flat, a)]).sum())
        .collect()
}

/// Solver for `(I - dt Δ_h) w = f`.
#[derive(Debug, Clone)]
pub struct HeatSolver {
    fft: TorusFft,
    dt: f64,
    inverse_symbol: Vec<f64>,
}

impl HeatSolver {
    pub fn new(grid: TorusGrid, dt: f64) -> Self {
        let inverse_symbol = laplacian_symbol(&grid)
            .into_iter()
            .map(|lam| 1.0 / (1.0 + dt * lam))
            .collect();
        Self {
            fft: TorusFft::new(grid),
            dt,
            inverse_symbol,
        }
    }

    pub fn grid(&self) -> &TorusGrid {
        self.fft.grid()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Overwrites `f` with `(I - dt Δ_h)^{-1} f`.
    pub fn solve(&self, f: &mut [f64]) {
        self.fft.apply_real_symbol(&self.inverse_symbol, f, None);
    }

    /// Two independent solves for the price of one complex transform.
    pub fn solve_pair(&self, a: &mut [f64], b: &mut [f64]) {
        self.fft.apply_real_symbol(&self.inverse_symbol, a, Some(b));
    }
}

/// Circular convolution `(k * f)_i = h^d Σ_j k_j f_{i-j}` with a fixed kernel.
#[derive(Debug, Clone)]
pub struct Convolver {
    fft: TorusFft,
    symbol: Vec<Complex64>,
    kernel: Vec<f64>,
}

impl Convolver {
    pub fn new(grid: TorusGrid, kernel: Vec<f64>) -> Self {
        let fft = TorusFft::new(grid);
        let vol = grid.cell_volume();
        let mut symbol: Vec<Complex64> = kernel.iter().map(|&k| Complex64::new(k * vol, 0.0)).collect();
        fft.forward(&mut symbol);
        Self { fft, symbol, kernel }
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    /// Discrete Fourier symbol `h^d Σ_j k_j e^{-2πi n·x_j}` in FFT order.
    pub fn symbol(&self) -> &[Complex64] {
        &self.symbol
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex64> = f.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.fft.forward(&mut buf);
        for (c, s) in buf.iter_mut().zip(&self.symbol) {
            *c *= s;
        }
        self.fft.inverse(&mut buf);
        buf.iter().map(|c| c.re).collect()
    }

    /// Same as [`apply`](Self::apply) by direct summation over the kernel support.
    pub fn apply_direct(&self, f: &[f64]) -> Vec<f64> {
        let grid = *self.fft.grid();
        let d = grid.dim();
        let vol = grid.cell_volume();
        let support: Vec<(Vec<usize>, f64)> = self
            .kernel
            .iter()
            .enumerate()
            .filter(|(_, &k)| k != 0.0)
            .map(|(j, &k)| {
                let mut idx = vec![0; d];
                grid.unflatten(j, &mut idx);
                (idx, k)
            })
            .collect();
        let mut i_idx = vec![0; d];
        let mut target = vec![0isize; d];
        (0..grid.node_count())
            .map(|i| {
                grid.unflatten(i, &mut i_idx);
                let mut acc = 0.0;
                for (j_idx, k) in &support {
                    for a in 0..d {
                        target[a] = i_idx[a] as isize - j_idx[a] as isize;
                    }
                    acc += k * f[grid.flatten(&target)];
                }
                acc * vol
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::laplacian;

    #[test]
    fn fft_round_trip_in_three_dimensions() {
        let g = TorusGrid::new(3, 8).unwrap();
        let fft = TorusFft::new(g);
        let orig: Vec<Complex64> = (0..g.node_count())
            .map(|i| Complex64::new((i as f64 * 0.71).sin(), (i as f64 * 0.13).cos()))
            .collect();
        let mut data = orig.clone();
        fft.forward(&mut data);
        fft.inverse(&mut data);
        for (a, b) in data.iter().zip(&orig) {
            assert!((a - b).norm() < 1e-13);
        }
    }

    #[test]
    fn heat_solve_inverts_the_operator() {
        for dim in 1..=3 {
            let g = TorusGrid::new(dim, 8).unwrap();
            let dt = 0.013;
            let solver = HeatSolver::new(g, dt);
            let f: Vec<f64> = (0..g.node_count()).map(|i| ((i * 7 % 11) as f64).sqrt()).collect();
            let mut w = f.clone();
            solver.solve(&mut w);
            let mut lap = vec![0.0; w.len()];
            laplacian(&g, &w, &mut lap);
            for i in 0..w.len() {
                assert!((w[i] - dt * lap[i] - f[i]).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn paired_solve_matches_two_single_solves() {
        let g = TorusGrid::new(2, 16).unwrap();
        let solver = HeatSolver::new(g, 0.01);
        let a0: Vec<f64> = (0..g.node_count()).map(|i| (i as f64).sin()).collect();
        let b0: Vec<f64> = (0..g.node_count()).map(|i| (i as f64 * 0.3).cos()).collect();
        let (mut a, mut b) = (a0.clone(), b0.clone());
        solver.solve_pair(&mut a, &mut b);
        let (mut a1, mut b1) = (a0, b0);
        solver.solve(&mut a1);
        solver.solve(&mut b1);
        for i in 0..a.len() {
            assert!((a[i] - a1[i]).abs() < 1e-13);
            assert!((b[i] - b1[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn fft_and_direct_convolution_agree() {
        for dim in 1..=2 {
            let g = TorusGrid::new(dim, 16).unwrap();
            let kernel: Vec<f64> = (0..g.node_count()).map(|i| if i % 5 == 0 { 1.0 + i as f64 } else { 0.0 }).collect();
            let conv = Convolver::new(g, kernel);
            let f: Vec<f64> = (0..g.node_count()).map(|i| (i as f64 * 0.37).sin()).collect();
            let a = conv.apply(&f);
            let b = conv.apply_direct(&f);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }
}
