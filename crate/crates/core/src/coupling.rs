//! Concrete data `(H, F, G)`, the bump mollifier and the mollified coupling
//! `x -> ξ^ε * F(·, ξ^ε * m)(x)`, plus runtime probes of the structural
//! assumptions (monotonicity, closeness to the local coupling, regularity).

use crate::error::{Error, Result};
use crate::grid::{holder_norm_probe, holder_seminorm_on, max_abs, min_image, ScalarField, TorusGrid};
use crate::measures::{DensityField, EmpiricalMeasure};
use crate::spectral::Convolver;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

/// Named parameter sets for the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    #[default]
    Default,
    Alternate,
    /// `F ≡ 0`, `G ≡ 0` and no potential, so zero solves every system.
    Decoupled,
}

/// `H(x, p) = sqrt(1 + |p|^2) - 1 + potential * cos(2π x_1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianSpec {
    pub potential: f64,
}

impl HamiltonianSpec {
    pub fn new(potential: f64) -> Self {
        Self { potential }
    }

    /// Sup of `|D_p H|`; the kinetic part has gradient norm `< 1`.
    pub fn lipschitz_bound(&self) -> f64 {
        1.0
    }

    #[inline]
    pub fn potential_at(&self, x: &[f64]) -> f64 {
        self.potential * (2.0 * PI * x[0]).cos()
    }

    #[inline]
    pub fn value(&self, x: &[f64], p: &[f64]) -> f64 {
        self.kinetic(p) + self.potential_at(x)
    }

    #[inline]
    pub fn kinetic(&self, p: &[f64]) -> f64 {
        let s: f64 = 1.0 + p.iter().map(|v| v * v).sum::<f64>();
        // sqrt(s) - 1 written to avoid cancellation for small |p|
        (s - 1.0) / (s.sqrt() + 1.0)
    }

    /// `D_p H(x, p) = p / sqrt(1 + |p|^2)`.
    #[inline]
    pub fn grad_p(&self, _x: &[f64], p: &[f64], out: &mut [f64]) {
        let s: f64 = 1.0 + p.iter().map(|v| v * v).sum::<f64>();
        let inv = 1.0 / s.sqrt();
        for (o, v) in out.iter_mut().zip(p) {
            *o = v * inv;
        }
    }

    /// `D^2_pp H = (I - p p^T / s) / sqrt(s)`, row-major `d x d`.
    pub fn hess_p(&self, _x: &[f64], p: &[f64], out: &mut [f64]) {
        let d = p.len();
        let s: f64 = 1.0 + p.iter().map(|v| v * v).sum::<f64>();
        let inv = 1.0 / s.sqrt();
        for a in 0..d {
            for b in 0..d {
                let delta = if a == b { 1.0 } else { 0.0 };
                out[a * d + b] = (delta - p[a] * p[b] / s) * inv;
            }
        }
    }

    /// `Γ q` with `Γ = D^2_pp H(p)`, without forming the matrix.
    #[inline]
    pub fn hess_p_apply(&self, p: &[f64], q: &[f64], out: &mut [f64]) {
        let s: f64 = 1.0 + p.iter().map(|v| v * v).sum::<f64>();
        let inv = 1.0 / s.sqrt();
        let pq: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
        for a in 0..p.len() {
            out[a] = (q[a] - p[a] * pq / s) * inv;
        }
    }

    /// Third derivative contracted twice: `(D^3_ppp H)(p)[q, q]`.
    #[inline]
    pub fn third_contract(&self, p: &[f64], q: &[f64], out: &mut [f64]) {
        let s: f64 = 1.0 + p.iter().map(|v| v * v).sum::<f64>();
        let s32 = s * s.sqrt();
        let s52 = s32 * s;
        let pq: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
        let qq: f64 = q.iter().map(|v| v * v).sum();
        for a in 0..p.len() {
            out[a] = (-2.0 * q[a] * pq - p[a] * qq) / s32 + 3.0 * p[a] * pq * pq / s52;
        }
    }
}

/// `F(x, m) = linear m + cubic m^3 + amplitude sin(2π x_1)` and
/// `G(x) = terminal cos(2π x_1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalCoupling {
    pub linear: f64,
    pub cubic: f64,
    pub amplitude: f64,
    pub terminal: f64,
}

impl LocalCoupling {
    /// Lower bound of `∂F/∂m` on `m >= 0`.
    pub fn delta(&self) -> f64 {
        self.linear
    }

    #[inline]
    pub fn source_at(&self, x: &[f64]) -> f64 {
        self.amplitude * (2.0 * PI * x[0]).sin()
    }

    #[inline]
    pub fn value(&self, x: &[f64], m: f64) -> f64 {
        self.linear * m + self.cubic * m * m * m + self.source_at(x)
    }

    #[inline]
    pub fn dm(&self, _x: &[f64], m: f64) -> f64 {
        self.linear + 3.0 * self.cubic * m * m
    }

    #[inline]
    pub fn dmm(&self, _x: &[f64], m: f64) -> f64 {
        6.0 * self.cubic * m
    }

    pub fn terminal_at(&self, x: &[f64]) -> f64 {
        self.terminal * (2.0 * PI * x[0]).cos()
    }

    /// `G` sampled on the grid.
    pub fn terminal_field(&self, grid: &TorusGrid) -> Vec<f64> {
        grid.sample(|x| self.terminal_at(x))
    }

    /// Nodewise `F(x_i, m_i)`.
    pub fn apply(&self, grid: &TorusGrid, m: &[f64]) -> Vec<f64> {
        let src = grid.sample(|x| self.source_at(x));
        m.iter()
            .zip(&src)
            .map(|(&v, s)| self.linear * v + self.cubic * v * v * v + s)
            .collect()
    }

    /// `F ≡ m`, handy for closed-form checks.
    pub fn identity() -> Self {
        Self {
            linear: 1.0,
            cubic: 0.0,
            amplitude: 0.0,
            terminal: 0.0,
        }
    }
}

/// The default data family and its variants.
pub fn default_problem(profile: Profile) -> (HamiltonianSpec, LocalCoupling) {
    match profile {
        Profile::Default => (
            HamiltonianSpec::new(0.1),
            LocalCoupling {
                linear: 1.0,
                cubic: 0.0,
                amplitude: 0.5,
                terminal: 0.2,
            },
        ),
        Profile::Alternate => (
            HamiltonianSpec::new(0.25),
            LocalCoupling {
                linear: 0.5,
                cubic: 0.2,
                amplitude: 0.3,
                terminal: 0.4,
            },
        ),
        Profile::Decoupled => (
            HamiltonianSpec::new(0.0),
            LocalCoupling {
                linear: 0.0,
                cubic: 0.0,
                amplitude: 0.0,
                terminal: 0.0,
            },
        ),
    }
}

/// Unnormalized bump `exp(-1 / (1 - r^2))` on `r < 1`.
#[inline]
pub fn bump_profile(r2: f64) -> f64 {
    if r2 < 1.0 {
        (-1.0 / (1.0 - r2)).exp()
    } else {
        0.0
    }
}

/// Adds `weight * kernel(z)` to `out` at every node within `radius` of
/// `center`, where `z` is the unwrapped displacement from the centre to the
/// node. Boxes wider than the torus visit a node once per periodic image.
pub(crate) fn splat<K: Fn(&[f64]) -> f64>(
    grid: &TorusGrid,
    center: &[f64],
    radius: f64,
    weight: f64,
    kernel: K,
    out: &mut [f64],
) {
    let d = grid.dim();
    let m = grid.points() as isize;
    let h = grid.spacing();
    let reach = (radius / h).ceil() as isize + 1;
    let width = (2 * reach + 1) as usize;
    let mut base = [0isize; 16];
    let mut frac = [0.0f64; 16];
    for a in 0..d {
        let s = center[a].rem_euclid(1.0) * m as f64;
        let i = s.floor();
        base[a] = i as isize;
        frac[a] = s - i;
    }
    let total = width.pow(d as u32);
    let mut z = [0.0f64; 16];
    for code in 0..total {
        let mut c = code;
        let mut flat = 0usize;
        let mut place = 1usize;
        for a in (0..d).rev() {
            let o = (c % width) as isize - reach;
            c /= width;
            z[a] = (o as f64 - frac[a]) * h;
            flat += place * (base[a] + o).rem_euclid(m) as usize;
            place *= m as usize;
        }
        let k = kernel(&z[..d]);
        if k != 0.0 {
            out[flat] += weight * k;
        }
    }
}

/// Periodized bump kernel at scale `ε`, renormalized to unit discrete mass.
#[derive(Debug, Clone)]
pub struct Mollifier {
    grid: TorusGrid,
    epsilon: f64,
    scale: f64,
    conv: Convolver,
}

impl Mollifier {
    pub fn new(grid: TorusGrid, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::param(format!("mollifier scale must be positive, got {epsilon}")));
        }
        let mut raw = vec![0.0; grid.node_count()];
        let e2 = epsilon * epsilon;
        let origin = vec![0.0; grid.dim()];
        splat(&grid, &origin, epsilon, 1.0, |z| bump_profile(z.iter().map(|v| v * v).sum::<f64>() / e2), &mut raw);
        let mass: f64 = raw.iter().sum::<f64>() * grid.cell_volume();
        let scale = 1.0 / mass;
        let samples: Vec<f64> = raw.iter().map(|v| v * scale).collect();
        if epsilon <= grid.spacing() {
            log::warn!(
                "mollifier scale {epsilon} is below the grid spacing {}; kernel is a discrete delta",
                grid.spacing()
            );
        }
        Ok(Self {
            grid,
            epsilon,
            scale,
            conv: Convolver::new(grid, samples),
        })
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// True when the support contains no node other than the centre.
    pub fn under_resolved(&self) -> bool {
        self.epsilon <= self.grid.spacing()
    }

    /// Kernel samples on the grid, centred at node 0.
    pub fn samples(&self) -> &[f64] {
        self.conv.kernel()
    }

    /// Normalization constant applied to the raw periodized profile.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Periodized kernel at an arbitrary displacement, with the same
    /// normalization as the grid samples.
    pub fn eval(&self, z: &[f64]) -> f64 {
        let d = z.len();
        let e2 = self.epsilon * self.epsilon;
        let reach = self.epsilon.ceil() as i64;
        let width = (2 * reach + 1) as usize;
        let mut acc = 0.0;
        for code in 0..width.pow(d as u32) {
            let mut c = code;
            let mut r2 = 0.0;
            for &za in z.iter() {
                let n = (c % width) as i64 - reach;
                c /= width;
                let v = min_image(za) + n as f64;
                r2 += v * v;
            }
            acc += bump_profile(r2 / e2);
        }
        acc * self.scale
    }

    /// Discrete Fourier symbol of the kernel for frequency index `k` (d = 1).
    pub fn symbol_1d(&self, k: usize) -> f64 {
        self.conv.symbol()[k].re
    }

    pub fn convolve(&self, f: &[f64]) -> Vec<f64> {
        self.conv.apply(f)
    }

    pub fn convolve_direct(&self, f: &[f64]) -> Vec<f64> {
        self.conv.apply_direct(f)
    }
}

/// Result of an atom-based evaluation; carries the resolution flag.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalEvaluation {
    pub values: Vec<f64>,
    pub under_resolved: bool,
}

/// `F^ε(x, m) = ξ^ε * F(·, ξ^ε * m)(x)`.
#[derive(Debug, Clone)]
pub struct MollifiedCoupling {
    base: LocalCoupling,
    mollifier: Mollifier,
    source: Vec<f64>,
}

impl MollifiedCoupling {
    pub fn new(base: LocalCoupling, mollifier: Mollifier) -> Self {
        let source = mollifier.grid().sample(|x| base.source_at(x));
        Self {
            base,
            mollifier,
            source,
        }
    }

    pub fn with_epsilon(base: LocalCoupling, grid: TorusGrid, epsilon: f64) -> Result<Self> {
        Ok(Self::new(base, Mollifier::new(grid, epsilon)?))
    }

    pub fn base(&self) -> &LocalCoupling {
        &self.base
    }

    pub fn mollifier(&self) -> &Mollifier {
        &self.mollifier
    }

    pub fn grid(&self) -> &TorusGrid {
        self.mollifier.grid()
    }

    fn outer(&self, smooth: &[f64], direct: bool) -> Vec<f64> {
        let b = &self.base;
        let g: Vec<f64> = smooth
            .iter()
            .zip(&self.source)
            .map(|(&s, a)| b.linear * s + b.cubic * s * s * s + a)
            .collect();
        if direct {
            self.mollifier.convolve_direct(&g)
        } else {
            self.mollifier.convolve(&g)
        }
    }

    /// Grid values of `F^ε(·, m)` for a nodal density (no validation).
    pub fn apply(&self, m: &[f64]) -> Vec<f64> {
        self.outer(&self.mollifier.convolve(m), false)
    }

    pub fn apply_direct(&self, m: &[f64]) -> Vec<f64> {
        self.outer(&self.mollifier.convolve_direct(m), true)
    }

    /// Action of the flat derivative: `ξ * [∂_m F(·, ξ*m) (ξ*ρ)]`.
    pub fn derivative(&self, m: &[f64], rho: &[f64]) -> Vec<f64> {
        let sm = self.mollifier.convolve(m);
        let sr = self.mollifier.convolve(rho);
        let g: Vec<f64> = sm.iter().zip(&sr).map(|(&a, &r)| self.base.dm(&[], a) * r).collect();
        self.mollifier.convolve(&g)
    }

    /// Second flat derivative: `ξ * [∂^2_m F(·, ξ*m) (ξ*ρ)^2]`.
    pub fn second_derivative(&self, m: &[f64], rho: &[f64]) -> Vec<f64> {
        let sm = self.mollifier.convolve(m);
        let sr = self.mollifier.convolve(rho);
        let g: Vec<f64> = sm.iter().zip(&sr).map(|(&a, &r)| self.base.dmm(&[], a) * r * r).collect();
        self.mollifier.convolve(&g)
    }

    /// Inner smoothing `ξ^ε * m` of an empirical measure at every node,
    /// with the kernel evaluated at exact atom displacements.
    pub fn smooth_empirical(&self, atoms: &EmpiricalMeasure) -> Vec<f64> {
        let grid = self.grid();
        let mut out = vec![0.0; grid.node_count()];
        let eps = self.mollifier.epsilon();
        let e2 = eps * eps;
        let scale = self.mollifier.scale();
        let w = atoms.weight();
        for x in atoms.iter() {
            splat(grid, x, eps, w * scale, |z| bump_profile(z.iter().map(|v| v * v).sum::<f64>() / e2), &mut out);
        }
        out
    }

    /// `F^ε(·, m)` at every node for an empirical measure.
    pub fn eval_empirical_field(&self, atoms: &EmpiricalMeasure) -> EmpiricalEvaluation {
        let smooth = self.smooth_empirical(atoms);
        EmpiricalEvaluation {
            values: self.outer(&smooth, false),
            under_resolved: self.mollifier.under_resolved(),
        }
    }

    /// `F^ε(x, m)` at an arbitrary point: exact inner smoothing, then the
    /// outer convolution by grid quadrature.
    pub fn eval_empirical(&self, atoms: &EmpiricalMeasure, x: &[f64]) -> Result<(f64, bool)> {
        if atoms.is_empty() {
            return Err(Error::UndefinedMeasure("empirical measure has no atoms".into()));
        }
        let grid = self.grid();
        if x.len() != grid.dim() {
            return Err(Error::shape("query point has wrong dimension"));
        }
        let smooth = self.smooth_empirical(atoms);
        let b = &self.base;
        let mut acc = 0.0;
        let mut z = vec![0.0; grid.dim()];
        for (i, (&s, a)) in smooth.iter().zip(&self.source).enumerate() {
            for (axis, za) in z.iter_mut().enumerate() {
                *za = x[axis] - grid.coord(i, axis);
            }
            let k = self.mollifier.eval(&z);
            if k != 0.0 {
                acc += k * (b.linear * s + b.cubic * s * s * s + a);
            }
        }
        Ok((acc * grid.cell_volume(), self.mollifier.under_resolved()))
    }
}

/// Validated evaluation on a density field.
pub fn mollified_eval(fc: &MollifiedCoupling, m: &DensityField) -> Result<ScalarField> {
    fc.grid().check_same(m.grid())?;
    ScalarField::spatial(*fc.grid(), fc.apply(m.values()))
}

pub fn mollified_eval_empirical(fc: &MollifiedCoupling, atoms: &EmpiricalMeasure, x: &[f64]) -> Result<(f64, bool)> {
    fc.eval_empirical(atoms, x)
}

/// `∫ (F^ε(x, m1) - F^ε(x, m2)) d(m1 - m2)(x)`.
pub fn monotonicity_probe(fc: &MollifiedCoupling, m1: &DensityField, m2: &DensityField) -> Result<f64> {
    fc.grid().check_same(m1.grid())?;
    fc.grid().check_same(m2.grid())?;
    let a = fc.apply(m1.values());
    let b = fc.apply(m2.values());
    let vol = fc.grid().cell_volume();
    Ok(vol
        * a.iter()
            .zip(&b)
            .zip(m1.values().iter().zip(m2.values()))
            .map(|((fa, fb), (x, y))| (fa - fb) * (x - y))
            .sum::<f64>())
}

fn random_frequency(rng: &mut ChaCha8Rng, dim: usize, max_freq: i64) -> Vec<i64> {
    loop {
        let n: Vec<i64> = (0..dim).map(|_| rng.random_range(-max_freq..=max_freq)).collect();
        if n.iter().any(|&v| v != 0) {
            return n;
        }
    }
}

/// Draws a trigonometric density `1 + s p(x)` whose Hölder probe is at
/// most `radius`; the principal frequency cycles through `1..=max_freq`.
pub fn sample_bounded_density(
    grid: &TorusGrid,
    radius: f64,
    alpha: f64,
    index: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DensityField> {
    if radius < 1.0 {
        return Err(Error::Sampler { radius });
    }
    let d = grid.dim();
    let max_freq = (grid.points() / 4).clamp(1, 32) as i64;
    let mut principal = random_frequency(rng, d, max_freq);
    principal[0] = 1 + (index as i64 % max_freq);
    let extra = random_frequency(rng, d, max_freq);
    let phi1: f64 = rng.random_range(0.0..2.0 * PI);
    let phi2: f64 = rng.random_range(0.0..2.0 * PI);
    let rel: f64 = rng.random_range(0.0..0.3);
    let p = grid.sample(|x| {
        let a: f64 = principal.iter().zip(x).map(|(&n, &xa)| n as f64 * xa).sum();
        let b: f64 = extra.iter().zip(x).map(|(&n, &xa)| n as f64 * xa).sum();
        (2.0 * PI * a + phi1).cos() + rel * (2.0 * PI * b + phi2).cos()
    });
    let mean = p.iter().sum::<f64>() / p.len() as f64;
    let p: Vec<f64> = p.iter().map(|v| v - mean).collect();
    let pmax = p.iter().cloned().fold(f64::MIN, f64::max);
    let pmin = p.iter().cloned().fold(f64::MAX, f64::min);
    let n = grid.node_count();
    let stride = n.div_ceil(4096).max(1);
    let semi = holder_seminorm_on(grid, &p, alpha, stride);
    let mut s = (radius - 1.0) / (pmax + semi);
    if pmin < 0.0 {
        s = s.min(1.0 / -pmin);
    }
    let values: Vec<f64> = p.iter().map(|v| (1.0 + s * v).max(0.0)).collect();
    DensityField::normalized(ScalarField::spatial(*grid, values)?)
}

/// Empirical lower bound of `sup ||F^ε(·, m) - F(·, m(·))||_∞` over
/// densities with Hölder probe `<= radius`.
pub fn closeness_probe(fc: &MollifiedCoupling, radius: f64, alpha: f64, samples: usize, seed: u64) -> Result<f64> {
    if samples == 0 {
        return Err(Error::param("closeness probe needs at least one sample"));
    }
    let grid = *fc.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = 0.0f64;
    for s in 0..samples {
        let m = sample_bounded_density(&grid, radius, alpha, s, &mut rng)?;
        debug_assert!(holder_norm_probe(m.field(), alpha)? <= radius * (1.0 + 1e-9));
        let mollified = fc.apply(m.values());
        let local = fc.base().apply(&grid, m.values());
        let gap = mollified.iter().zip(&local).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        best = best.max(gap);
    }
    Ok(best)
}

/// Pure forward differences of order `j` along `axis`, scaled by `h^-j`.
fn forward_difference(grid: &TorusGrid, f: &[f64], axis: usize, order: usize) -> Vec<f64> {
    let inv_h = 1.0 / grid.spacing();
    let mut cur = f.to_vec();
    for _ in 0..order {
        cur = (0..cur.len())
            .map(|i| (cur[grid.shift(i, axis, 1)] - cur[i]) * inv_h)
            .collect();
    }
    cur
}

/// Discrete `C^{4+α}` norm of `x -> F^ε(x, m)`: sup norms of pure
/// differences up to order four plus the Hölder seminorm of the fourth.
pub fn regularity_probe_on(fc: &MollifiedCoupling, alpha: f64, densities: &[DensityField]) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::param(format!("Hölder exponent {alpha} outside (0,1]")));
    }
    let grid = *fc.grid();
    let stride = grid.node_count().div_ceil(4096).max(1);
    let mut best = 0.0f64;
    for m in densities {
        fc.grid().check_same(m.grid())?;
        let g = fc.apply(m.values());
        let mut norm = max_abs(&g);
        for axis in 0..grid.dim() {
            for order in 1..=4 {
                let dj = forward_difference(&grid, &g, axis, order);
                norm += max_abs(&dj);
                if order == 4 {
                    norm += holder_seminorm_on(&grid, &dj, alpha, stride);
                }
            }
        }
        best = best.max(norm);
    }
    Ok(best)
}

/// Regularity probe over the built-in sample set: the uniform density, a
/// single-node mass and a smooth cosine profile.
pub fn regularity_probe(fc: &MollifiedCoupling, alpha: f64) -> Result<f64> {
    let grid = *fc.grid();
    let n = grid.node_count();
    let mut spike = vec![0.0; n];
    spike[0] = 1.0 / grid.cell_volume();
    let samples = vec![
        DensityField::uniform(grid),
        DensityField::new(ScalarField::spatial(grid, spike)?)?,
        DensityField::from_fn(grid, |x| 1.0 + 0.5 * (2.0 * PI * x[0]).cos())?,
    ];
    regularity_probe_on(fc, alpha, &samples)
}

/// On-disk problem description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct ProblemFile {
    #[serde(default)]
    pub hamiltonian: HamiltonianSection,
    #[serde(default)]
    pub coupling: CouplingSection,
    #[serde(default)]
    pub terminal: TerminalSection,
    #[serde(default)]
    pub mollifier: MollifierSection,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HamiltonianSection {
    #[serde(default)]
    pub profile: Profile,
    pub potential: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSection {
    #[serde(default)]
    pub profile: Profile,
    pub linear: Option<f64>,
    pub cubic: Option<f64>,
    pub amplitude: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalSection {
    #[serde(default)]
    pub profile: Profile,
    pub amplitude: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelProfile {
    #[default]
    Bump,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MollifierSection {
    pub epsilon: f64,
    #[serde(default)]
    pub profile: KernelProfile,
}

impl Default for MollifierSection {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            profile: KernelProfile::Bump,
        }
    }
}


impl ProblemFile {
    /// Resolves profiles and overrides into concrete data and `ε`.
    pub fn build(&self) -> Result<(HamiltonianSpec, LocalCoupling, f64)> {
        let (mut h, _) = default_problem(self.hamiltonian.profile);
        if let Some(p) = self.hamiltonian.potential {
            h.potential = p;
        }
        let (_, mut f) = default_problem(self.coupling.profile);
        if let Some(v) = self.coupling.linear {
            f.linear = v;
        }
        if let Some(v) = self.coupling.cubic {
            f.cubic = v;
        }
        if let Some(v) = self.coupling.amplitude {
            f.amplitude = v;
        }
        let (_, g) = default_problem(self.terminal.profile);
        f.terminal = self.terminal.amplitude.unwrap_or(g.terminal);
        if f.linear < 0.0 || f.cubic < 0.0 {
            return Err(Error::Config("coupling must be non-decreasing in m".into()));
        }
        if !(self.mollifier.epsilon > 0.0) {
            return Err(Error::Config("mollifier epsilon must be positive".into()));
        }
        Ok((h, f, self.mollifier.epsilon))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads `.toml` or `.json` by extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json_str(&text),
            Some("toml") => Self::from_toml_str(&text),
            other => Err(Error::Config(format!("unknown problem file extension {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid1(m: usize) -> TorusGrid {
        TorusGrid::new(1, m).unwrap()
    }

    #[test]
    fn default_hamiltonian_at_zero_momentum() {
        let (h, _) = default_problem(Profile::Default);
        let mut g = [1.0; 2];
        h.grad_p(&[0.3, 0.1], &[0.0, 0.0], &mut g);
        assert_eq!(g, [0.0, 0.0]);
        let mut hess = [0.0; 4];
        h.hess_p(&[0.3, 0.1], &[0.0, 0.0], &mut hess);
        assert_eq!(hess, [1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn momentum_gradient_is_bounded_on_a_large_ball() {
        let (h, _) = default_problem(Profile::Default);
        let mut best = 0.0f64;
        let mut g = [0.0; 2];
        for i in 0..200 {
            for j in 0..200 {
                let r = 50.0 * i as f64 / 199.0;
                let th = 2.0 * PI * j as f64 / 200.0;
                h.grad_p(&[0.0, 0.0], &[r * th.cos(), r * th.sin()], &mut g);
                best = best.max((g[0] * g[0] + g[1] * g[1]).sqrt());
            }
        }
        assert!(best <= h.lipschitz_bound());
    }

    #[test]
    fn hamiltonian_derivatives_match_finite_differences() {
        let (h, _) = default_problem(Profile::Alternate);
        let x = [0.37, 0.81];
        let p = [0.7, -1.3];
        let step = 1e-5;
        let mut g = [0.0; 2];
        h.grad_p(&x, &p, &mut g);
        let mut hess = [0.0; 4];
        h.hess_p(&x, &p, &mut hess);
        for a in 0..2 {
            let mut pp = p;
            pp[a] += step;
            let mut pm = p;
            pm[a] -= step;
            let fd = (h.value(&x, &pp) - h.value(&x, &pm)) / (2.0 * step);
            assert!((fd - g[a]).abs() < 1e-9);
            let (mut gp, mut gm) = ([0.0; 2], [0.0; 2]);
            h.grad_p(&x, &pp, &mut gp);
            h.grad_p(&x, &pm, &mut gm);
            for b in 0..2 {
                assert!(((gp[b] - gm[b]) / (2.0 * step) - hess[b * 2 + a]).abs() < 1e-8);
            }
        }
        // third derivative along q
        let q = [0.4, 0.9];
        let mut t = [0.0; 2];
        h.third_contract(&p, &q, &mut t);
        let hq = |p: &[f64]| {
            let mut out = [0.0; 2];
            h.hess_p_apply(p, &q, &mut out);
            out
        };
        let pp = [p[0] + step * q[0], p[1] + step * q[1]];
        let pm = [p[0] - step * q[0], p[1] - step * q[1]];
        let (a, b) = (hq(&pp), hq(&pm));
        for k in 0..2 {
            assert!(((a[k] - b[k]) / (2.0 * step) - t[k]).abs() < 1e-8);
        }
        // positive definite Hessian at sampled momenta
        for s in 0..50 {
            let p = [(s as f64 * 1.7).sin() * 20.0, (s as f64 * 0.3).cos() * 20.0];
            h.hess_p(&x, &p, &mut hess);
            let det = hess[0] * hess[3] - hess[1] * hess[2];
            assert!(hess[0] > 0.0 && det > 0.0);
            assert!((hess[1] - hess[2]).abs() < 1e-15);
        }
    }

    #[test]
    fn local_coupling_is_increasing() {
        for profile in [Profile::Default, Profile::Alternate] {
            let (_, f) = default_problem(profile);
            for i in 0..100 {
                let m = i as f64 * 0.1;
                assert!(f.dm(&[0.2], m) >= f.delta());
            }
        }
    }

    #[test]
    fn kernel_has_unit_mass_and_is_symmetric() {
        for (dim, m, eps) in [(1, 64, 0.1), (1, 32, 0.8), (2, 32, 0.15), (1, 64, 1.04)] {
            let g = TorusGrid::new(dim, m).unwrap();
            let k = Mollifier::new(g, eps).unwrap();
            let mass: f64 = k.samples().iter().sum::<f64>() * g.cell_volume();
            assert!((mass - 1.0).abs() < 1e-10);
            for i in 0..g.node_count() {
                let mut idx = vec![0isize; dim];
                for a in 0..dim {
                    idx[a] = -(g.axis_index(i, a) as isize);
                }
                assert!((k.samples()[i] - k.samples()[g.flatten(&idx)]).abs() < 1e-12);
            }
            // continuous evaluation agrees with the samples at nodes
            for i in 0..g.node_count() {
                assert!((k.eval(&g.coords(i)) - k.samples()[i]).abs() < 1e-9 * k.samples()[0]);
            }
        }
    }

    #[test]
    fn uniform_density_is_a_fixed_point_of_identity_coupling() {
        let g = grid1(64);
        let fc = MollifiedCoupling::with_epsilon(LocalCoupling::identity(), g, 0.1).unwrap();
        let out = mollified_eval(&fc, &DensityField::uniform(g)).unwrap();
        assert!(out.values().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn cosine_density_is_damped_by_squared_symbol() {
        let g = grid1(128);
        let fc = MollifiedCoupling::with_epsilon(LocalCoupling::identity(), g, 0.1).unwrap();
        let m = DensityField::from_fn(g, |x| 1.0 + 0.5 * (2.0 * PI * x[0]).cos()).unwrap();
        let out = fc.apply(m.values());
        // independent oracle: the first Fourier coefficient of the kernel by direct sum
        let c: f64 = fc
            .mollifier()
            .samples()
            .iter()
            .enumerate()
            .map(|(j, k)| k * (2.0 * PI * j as f64 / 128.0).cos())
            .sum::<f64>()
            / 128.0;
        for (i, v) in out.iter().enumerate() {
            let x = i as f64 / 128.0;
            assert!((v - (1.0 + 0.5 * c * c * (2.0 * PI * x).cos())).abs() < 1e-12);
        }
        assert!((c - fc.mollifier().symbol_1d(1)).abs() < 1e-13);
    }

    #[test]
    fn tiny_scale_reduces_to_local_coupling() {
        let g = grid1(64);
        let (_, f) = default_problem(Profile::Default);
        let fc = MollifiedCoupling::with_epsilon(f, g, 0.5 / 64.0).unwrap();
        assert!(fc.mollifier().under_resolved());
        let m = DensityField::from_fn(g, |x| 1.0 + 0.5 * (2.0 * PI * x[0]).cos()).unwrap();
        let a = fc.apply(m.values());
        let b = f.apply(&g, m.values());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fft_and_direct_evaluation_agree() {
        let g = grid1(128);
        let (_, f) = default_problem(Profile::Alternate);
        let fc = MollifiedCoupling::with_epsilon(f, g, 0.07).unwrap();
        let m = DensityField::from_fn(g, |x| 1.0 + 0.9 * (2.0 * PI * 3.0 * x[0]).sin()).unwrap();
        let a = fc.apply(m.values());
        let b = fc.apply_direct(m.values());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn single_atom_gives_self_convolved_kernel() {
        let g = grid1(64);
        let fc = MollifiedCoupling::with_epsilon(LocalCoupling::identity(), g, 0.12).unwrap();
        let x0 = 0.3137;
        let em = EmpiricalMeasure::from_points(vec![vec![x0]]).unwrap();
        let k = fc.mollifier();
        for x in [0.0, 0.25, 0.3, 0.41, 0.9] {
            let (v, flag) = fc.eval_empirical(&em, &[x]).unwrap();
            assert!(!flag);
            // oracle: quadrature of ξ(x - y) ξ(y - x0) over grid nodes
            let oracle: f64 = (0..64)
                .map(|j| {
                    let y = j as f64 / 64.0;
                    k.eval(&[x - y]) * k.eval(&[y - x0])
                })
                .sum::<f64>()
                / 64.0;
            assert!((v - oracle).abs() < 1e-10, "{v} vs {oracle}");
        }
    }

    #[test]
    fn coincident_atoms_equal_one_atom() {
        let g = grid1(64);
        let fc = MollifiedCoupling::with_epsilon(LocalCoupling::identity(), g, 0.1).unwrap();
        let one = EmpiricalMeasure::from_points(vec![vec![0.4]]).unwrap();
        let two = EmpiricalMeasure::from_points(vec![vec![0.4], vec![0.4]]).unwrap();
        let a = fc.eval_empirical_field(&one).values;
        let b = fc.eval_empirical_field(&two).values;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn many_uniform_atoms_approach_one() {
        let g = grid1(64);
        let fc = MollifiedCoupling::with_epsilon(LocalCoupling::identity(), g, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let pts: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random::<f64>()]).collect();
        let em = EmpiricalMeasure::from_points(pts.clone()).unwrap();
        let (v, _) = fc.eval_empirical(&em, &[0.5]).unwrap();
        // Monte Carlo oracle: the value is a mean of n iid terms g(x_j) with
        // g = ξ*ξ(0.5 - ·); estimate its standard error from the same sample
        let k = fc.mollifier();
        let kk = |z: f64| (0..64).map(|j| k.eval(&[0.5 - j as f64 / 64.0]) * k.eval(&[j as f64 / 64.0 - z])).sum::<f64>() / 64.0;
        let terms: Vec<f64> = pts.iter().map(|p| kk(p[0])).collect();
        let mean = terms.iter().sum::<f64>() / n as f64;
        let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((v - mean).abs() < 1e-10);
        assert!((v - 1.0).abs() < 3.0 * se + 1e-3, "{v} se {se}");
    }

    #[test]
    fn monotonicity_pairing_for_identity_coupling_is_squared_norm() {
        let g = grid1(128);
        let fc = MollifiedCoupling::with_epsilon(LocalCoupling::identity(), g, 0.1).unwrap();
        let m1 = DensityField::from_fn(g, |x| 1.0 + 0.5 * (2.0 * PI * x[0]).cos()).unwrap();
        let m2 = DensityField::from_fn(g, |x| 1.0 + 0.3 * (2.0 * PI * 2.0 * x[0]).sin()).unwrap();
        let p = monotonicity_probe(&fc, &m1, &m2).unwrap();
        let diff: Vec<f64> = m1.values().iter().zip(m2.values()).map(|(a, b)| a - b).collect();
        let sd = fc.mollifier().convolve_direct(&diff);
        let oracle = sd.iter().map(|v| v * v).sum::<f64>() / 128.0;
        assert!((p - oracle).abs() < 1e-12);
        assert_eq!(monotonicity_probe(&fc, &m1, &m1).unwrap(), 0.0);
    }

    #[test]
    fn closeness_vanishes_for_constants_and_decreases_with_scale() {
        let g = grid1(128);
        let fc = MollifiedCoupling::with_epsilon(LocalCoupling::identity(), g, 0.1).unwrap();
        // radius 1 only admits the uniform density
        assert!(closeness_probe(&fc, 1.0, 1.0, 4, 3).unwrap() < 1e-12);
        assert!(matches!(closeness_probe(&fc, 0.5, 1.0, 4, 3), Err(Error::Sampler { .. })));
        let (_, f) = default_problem(Profile::Default);
        let vals: Vec<f64> = [0.2, 0.1, 0.05]
            .iter()
            .map(|&e| {
                let fc = MollifiedCoupling::with_epsilon(f, g, e).unwrap();
                closeness_probe(&fc, 5.0, 1.0, 64, 11).unwrap()
            })
            .collect();
        assert!(vals[0] > vals[1] && vals[1] > vals[2], "{vals:?}");
    }

    #[test]
    fn closeness_grows_at_most_linearly_in_radius() {
        let g = grid1(128);
        let (_, f) = default_problem(Profile::Default);
        let fc = MollifiedCoupling::with_epsilon(f, g, 0.1).unwrap();
        let radii = [2.0, 4.0, 8.0, 16.0];
        let r: Vec<f64> = radii.iter().map(|&r| closeness_probe(&fc, r, 1.0, 64, 5).unwrap()).collect();
        // the amplitude of admissible perturbations is linear in R - 1, so
        // the gap per unit of (1 + R) stays below the slope measured at R = 2
        let slope = r[0] / (radii[0] - 1.0);
        for (k, rad) in r.iter().zip(radii) {
            assert!(*k / (1.0 + rad) <= slope * 1.05, "{r:?}");
        }
    }

    #[test]
    fn regularity_probe_constant_case_and_translation() {
        let g = grid1(64);
        let fc = MollifiedCoupling::with_epsilon(LocalCoupling::identity(), g, 0.2).unwrap();
        let v = regularity_probe_on(&fc, 0.5, &[DensityField::uniform(g)]).unwrap();
        assert!((v - 1.0).abs() < 1e-9);
        let m = DensityField::from_fn(g, |x| 1.0 + 0.7 * (2.0 * PI * x[0]).cos()).unwrap();
        let shifted: Vec<f64> = (0..64).map(|i| m.values()[(i + 64 - 5) % 64]).collect();
        let ms = DensityField::new(ScalarField::spatial(g, shifted).unwrap()).unwrap();
        let a = regularity_probe_on(&fc, 0.5, &[m]).unwrap();
        let b = regularity_probe_on(&fc, 0.5, &[ms]).unwrap();
        assert!((a - b).abs() < 1e-9 * a);
    }

    #[test]
    fn regularity_probe_grows_as_scale_shrinks() {
        let g = grid1(256);
        let vals: Vec<f64> = [0.2, 0.1, 0.05]
            .iter()
            .map(|&e| {
                let fc = MollifiedCoupling::with_epsilon(LocalCoupling::identity(), g, e).unwrap();
                regularity_probe(&fc, 0.5).unwrap()
            })
            .collect();
        assert!(vals[0] < vals[1] && vals[1] < vals[2]);
        let slope = ((vals[2] / vals[0]).ln() / (0.05f64 / 0.2).ln()).abs();
        assert!(slope <= 1.0 + 4.0 + 0.5 + 0.5, "growth exponent {slope}");
    }

    #[test]
    fn problem_file_round_trips_both_formats() {
        let text = r#"
            [hamiltonian]
            profile = "alternate"
            [coupling]
            profile = "default"
            cubic = 0.1
            [terminal]
            amplitude = 0.05
            [mollifier]
            epsilon = 0.15
        "#;
        let pf = ProblemFile::from_toml_str(text).unwrap();
        let (h, f, eps) = pf.build().unwrap();
        assert_eq!(h.potential, 0.25);
        assert_eq!(f.cubic, 0.1);
        assert_eq!(f.terminal, 0.05);
        assert_eq!(eps, 0.15);
        let json = serde_json::to_string(&pf).unwrap();
        assert_eq!(ProblemFile::from_json_str(&json).unwrap(), pf);
        assert!(ProblemFile::from_toml_str("[coupling]\nlinear = -1.0").unwrap().build().is_err());
    }
}
