//! Probability densities on the grid, empirical measures, projections
//! between the two and the Monge–Kantorovich distance.
//!
//! Grid densities are read as cell-uniform: node `i` carries mass
//! `h^d m_i` spread uniformly over the cell `[(i - 1/2) h, (i + 1/2) h)^d`.

use crate::coupling::{bump_profile, splat};
use crate::error::{Error, Result};
use crate::grid::{geodesic_distance, ScalarField, TorusGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

/// Allowed deviation of the total mass from one.
pub const MASS_TOLERANCE: f64 = 1e-10;

/// Nonnegative grid function with unit mass.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    field: ScalarField,
}

impl DensityField {
    /// Validates nonnegativity and unit mass.
    pub fn new(field: ScalarField) -> Result<Self> {
        if !field.is_spatial() {
            return Err(Error::InvalidDensity("density must be a spatial field".into()));
        }
        if let Some(i) = field.values().iter().position(|&v| v < 0.0) {
            return Err(Error::InvalidDensity(format!(
                "negative value {} at node {i}",
                field.values()[i]
            )));
        }
        let mass = field.integral(0);
        if (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidDensity(format!("mass {mass} differs from 1")));
        }
        Ok(Self { field })
    }

    /// Rescales a nonnegative field to unit mass.
    pub fn normalized(field: ScalarField) -> Result<Self> {
        if field.values().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidDensity("negative values cannot be normalized".into()));
        }
        let mass = field.integral(0);
        if !(mass > 0.0) {
            return Err(Error::InvalidDensity("zero total mass".into()));
        }
        Self::new(field.scaled(1.0 / mass))
    }

    pub fn from_fn<F: Fn(&[f64]) -> f64>(grid: TorusGrid, f: F) -> Result<Self> {
        Self::normalized(ScalarField::from_fn(grid, f)?)
    }

    pub fn uniform(grid: TorusGrid) -> Self {
        Self {
            field: ScalarField::constant(grid, 1.0).expect("finite constant"),
        }
    }

    pub fn grid(&self) -> &TorusGrid {
        self.field.grid()
    }

    pub fn values(&self) -> &[f64] {
        self.field.values()
    }

    pub fn field(&self) -> &ScalarField {
        &self.field
    }

    pub fn into_field(self) -> ScalarField {
        self.field
    }

    pub fn mass(&self) -> f64 {
        self.field.integral(0)
    }
}

/// Uniform atomic measure, optionally built from a point list with one
/// index excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    atoms: Vec<f64>,
    excluded: Option<usize>,
}

impl EmpiricalMeasure {
    /// All points carry weight `1 / len`; coordinates are wrapped to `[0, 1)`.
    pub fn from_points(points: Vec<Vec<f64>>) -> Result<Self> {
        let dim = points.first().map(|p| p.len()).ok_or_else(|| {
            Error::UndefinedMeasure("an empirical measure needs at least one atom".into())
        })?;
        if dim == 0 {
            return Err(Error::shape("atoms must have dimension >= 1"));
        }
        let mut atoms = Vec::with_capacity(points.len() * dim);
        for p in &points {
            if p.len() != dim {
                return Err(Error::shape("atoms have mixed dimensions"));
            }
            for &c in p {
                if !c.is_finite() {
                    return Err(Error::NonFinite { index: atoms.len(), value: c });
                }
                atoms.push(wrap(c));
            }
        }
        Ok(Self {
            dim,
            atoms,
            excluded: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.atoms.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.len() as f64
    }

    pub fn excluded_index(&self) -> Option<usize> {
        self.excluded
    }

    pub fn atom(&self, j: usize) -> &[f64] {
        &self.atoms[j * self.dim..(j + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.atoms.chunks(self.dim)
    }

    /// Atoms sorted lexicographically; equal multisets give equal output.
    pub fn sorted_atoms(&self) -> Vec<Vec<f64>> {
        let mut v: Vec<Vec<f64>> = self.iter().map(|a| a.to_vec()).collect();
        v.sort_by(|a, b| a.partial_cmp(b).expect("finite atoms"));
        v
    }

    /// Multiset equality of the supports.
    pub fn same_multiset(&self, other: &Self) -> bool {
        self.dim == other.dim && self.sorted_atoms() == other.sorted_atoms()
    }
}

#[inline]
fn wrap(x: f64) -> f64 {
    let w = x.rem_euclid(1.0);
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

/// Empirical measure of every point except `i`.
pub fn empirical(points: &[Vec<f64>], i: usize) -> Result<EmpiricalMeasure> {
    if points.len() < 2 {
        return Err(Error::UndefinedMeasure(format!(
            "{} point(s): the weight 1/(N-1) is undefined",
            points.len()
        )));
    }
    if i >= points.len() {
        return Err(Error::param(format!("excluded index {i} out of range")));
    }
    let others: Vec<Vec<f64>> = points
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, p)| p.clone())
        .collect();
    let mut em = EmpiricalMeasure::from_points(others)?;
    em.excluded = Some(i);
    Ok(em)
}

/// Either kind of measure, for the distance routines.
#[derive(Debug, Clone, Copy)]
pub enum Measure<'a> {
    Density(&'a DensityField),
    Empirical(&'a EmpiricalMeasure),
}

impl<'a> From<&'a DensityField> for Measure<'a> {
    fn from(d: &'a DensityField) -> Self {
        Measure::Density(d)
    }
}

impl<'a> From<&'a EmpiricalMeasure> for Measure<'a> {
    fn from(e: &'a EmpiricalMeasure) -> Self {
        Measure::Empirical(e)
    }
}

impl Measure<'_> {
    fn dim(&self) -> usize {
        match self {
            Measure::Density(d) => d.grid().dim(),
            Measure::Empirical(e) => e.dim(),
        }
    }
}

/// Breakpoint of a cumulative distribution on `[0, 1)`: at `pos` the CDF
/// jumps by `jump` and its slope changes by `kink`.
#[derive(Debug, Clone, Copy)]
struct Event {
    pos: f64,
    jump: f64,
    kink: f64,
}

/// Events and initial slope of `sign * F_mu` on the circle cut at 0.
fn cdf_events(mu: Measure<'_>, sign: f64, events: &mut Vec<Event>) -> f64 {
    match mu {
        Measure::Empirical(e) => {
            let w = e.weight();
            for a in e.iter() {
                events.push(Event {
                    pos: a[0],
                    jump: sign * w,
                    kink: 0.0,
                });
            }
            0.0
        }
        Measure::Density(d) => {
            let m = d.values();
            let n = m.len();
            let h = d.grid().spacing();
            // cell i covers [(i - 1/2) h, (i + 1/2) h); the boundary after
            // cell i sits at (i + 1/2) h and changes the slope to m_{i+1}
            for i in 0..n {
                let next = m[(i + 1) % n];
                events.push(Event {
                    pos: (i as f64 + 0.5) * h,
                    jump: 0.0,
                    kink: sign * (next - m[i]),
                });
            }
            sign * m[0]
        }
    }
}

/// Piecewise-linear description of `F_mu - F_nu` on `[0, 1]`:
/// segments `(start, end, value at start, slope)`.
fn cdf_difference(mu: Measure<'_>, nu: Measure<'_>) -> Vec<(f64, f64, f64, f64)> {
    let mut events = Vec::new();
    let mut slope = cdf_events(mu, 1.0, &mut events) + cdf_events(nu, -1.0, &mut events);
    events.sort_by(|a, b| a.pos.partial_cmp(&b.pos).expect("finite positions"));
    let mut segments = Vec::with_capacity(events.len() + 1);
    let mut value = 0.0;
    let mut start = 0.0;
    for e in events {
        if e.pos > start {
            segments.push((start, e.pos, value, slope));
            value += slope * (e.pos - start);
            start = e.pos;
        }
        value += e.jump;
        slope += e.kink;
    }
    if start < 1.0 {
        segments.push((start, 1.0, value, slope));
    }
    segments
}

/// Lebesgue measure of `{t in segment : D(t) < c}`.
fn measure_below(seg: &(f64, f64, f64, f64), c: f64) -> f64 {
    let (a, b, v, s) = *seg;
    let len = b - a;
    if s == 0.0 {
        return if v < c { len } else { 0.0 };
    }
    let t = ((c - v) / s).clamp(0.0, len);
    if s > 0.0 {
        t
    } else {
        len - t
    }
}

/// `∫ |v + s t - c| dt` over `[0, len]`.
fn abs_integral(v: f64, s: f64, len: f64, c: f64) -> f64 {
    let y0 = v - c;
    let y1 = v + s * len - c;
    if y0 * y1 >= 0.0 {
        0.5 * (y0.abs() + y1.abs()) * len
    } else {
        let t = -y0 / s;
        0.5 * (y0.abs() * t + y1.abs() * (len - t))
    }
}

/// `∫_0^1 |D(t) - c| dt` for the cumulative difference of two measures.
fn shifted_cdf_integral(segments: &[(f64, f64, f64, f64)], c: f64) -> f64 {
    segments
        .iter()
        .map(|&(a, b, v, s)| abs_integral(v, s, b - a, c))
        .sum()
}

/// Exact `W_1` on the unit circle: `min_c ∫ |F_mu - F_nu - c|`, with the
/// optimal `c` a Lebesgue median of the CDF difference.
pub fn w1_circle<'a, 'b>(mu: impl Into<Measure<'a>>, nu: impl Into<Measure<'b>>) -> Result<f64> {
    let (mu, nu) = (mu.into(), nu.into());
    for m in [mu, nu] {
        if m.dim() != 1 {
            return Err(Error::UnsupportedDimension {
                dim: m.dim(),
                hint: "exact W1 is one-dimensional; use w1_bound".into(),
            });
        }
    }
    if let (Measure::Density(a), Measure::Density(b)) = (mu, nu) {
        a.grid().check_same(b.grid())?;
    }
    let segments = cdf_difference(mu, nu);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(a, b, v, s) in &segments {
        let end = v + s * (b - a);
        lo = lo.min(v.min(end));
        hi = hi.max(v.max(end));
    }
    if !(hi > lo) {
        return Ok(shifted_cdf_integral(&segments, lo));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let below: f64 = segments.iter().map(|s| measure_below(s, mid)).sum();
        if below >= 0.5 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let c = 0.5 * (lo + hi);
    Ok(shifted_cdf_integral(&segments, c))
}

/// Bounds `lower <= W_1 <= upper` in any dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct W1Bounds {
    pub lower: f64,
    pub upper: f64,
}

/// Largest frequency per axis in the Lipschitz test dictionary.
const LIPSCHITZ_DICT_FREQ: i64 = 4;

fn bound_grid(dim: usize) -> Result<TorusGrid> {
    let points = match dim {
        1 => 128,
        2 => 32,
        3 => 16,
        _ => 8,
    };
    TorusGrid::new(dim, points)
}

/// Cosine and sine pairings `∫ cos(2π n·x) dμ`, `∫ sin(2π n·x) dμ`.
fn fourier_pair(mu: Measure<'_>, n: &[i64]) -> (f64, f64) {
    match mu {
        Measure::Empirical(e) => {
            let w = e.weight();
            e.iter().fold((0.0, 0.0), |(c, s), x| {
                let ph = 2.0 * PI * n.iter().zip(x).map(|(&k, &v)| k as f64 * v).sum::<f64>();
                (c + w * ph.cos(), s + w * ph.sin())
            })
        }
        Measure::Density(d) => {
            let g = d.grid();
            let h = g.spacing();
            // exact cell average of the mode over a cell-uniform density
            let sinc: f64 = n
                .iter()
                .map(|&k| {
                    let a = PI * k as f64 * h;
                    if a == 0.0 {
                        1.0
                    } else {
                        a.sin() / a
                    }
                })
                .product();
            let vol = g.cell_volume();
            let mut acc = (0.0, 0.0);
            for (i, &m) in d.values().iter().enumerate() {
                let ph: f64 = 2.0 * PI * (0..g.dim()).map(|a| n[a] as f64 * g.coord(i, a)).sum::<f64>();
                acc.0 += m * ph.cos();
                acc.1 += m * ph.sin();
            }
            (acc.0 * vol * sinc, acc.1 * vol * sinc)
        }
    }
}

fn lipschitz_lower(mu: Measure<'_>, nu: Measure<'_>, dim: usize) -> f64 {
    let width = (2 * LIPSCHITZ_DICT_FREQ + 1) as usize;
    let mut best = 0.0f64;
    let mut n = vec![0i64; dim];
    for code in 0..width.pow(dim as u32) {
        let mut c = code;
        for a in (0..dim).rev() {
            n[a] = (c % width) as i64 - LIPSCHITZ_DICT_FREQ;
            c /= width;
        }
        match n.iter().find(|&&v| v != 0) {
            Some(&first) if first > 0 => {}
            _ => continue,
        }
        let norm = 2.0 * PI * n.iter().map(|&k| (k * k) as f64).sum::<f64>().sqrt();
        let (ca, sa) = fourier_pair(mu, &n);
        let (cb, sb) = fourier_pair(nu, &n);
        best = best.max(((ca - cb).abs()).max((sa - sb).abs()) / norm);
    }
    best
}

/// Node masses on `grid` plus the cost already paid to move them there.
fn node_masses(mu: Measure<'_>, grid: &TorusGrid, mixed: bool) -> (Vec<f64>, f64) {
    let mut out = vec![0.0; grid.node_count()];
    let m = grid.points() as f64;
    match mu {
        Measure::Empirical(e) => {
            let w = e.weight();
            let mut cost = 0.0;
            let mut idx = vec![0isize; grid.dim()];
            let mut node = vec![0.0; grid.dim()];
            for x in e.iter() {
                for a in 0..grid.dim() {
                    let k = (x[a] * m).round();
                    idx[a] = k as isize;
                    node[a] = k / m;
                }
                cost += w * geodesic_distance(x, &node);
                out[grid.flatten(&idx)] += w;
            }
            (out, cost)
        }
        Measure::Density(d) => {
            let vol = d.grid().cell_volume();
            for (o, v) in out.iter_mut().zip(d.values()) {
                *o = v * vol;
            }
            // cell-uniform mass to its node costs at most E|U| <= sqrt(d/12) h
            let cost = if mixed {
                (grid.dim() as f64 / 12.0).sqrt() * grid.spacing()
            } else {
                0.0
            };
            (out, cost)
        }
    }
}

/// Greedy plan over node offsets of increasing length.
fn greedy_transport(grid: &TorusGrid, supply: &[f64], demand: &[f64]) -> f64 {
    let n = grid.node_count();
    let mut excess: Vec<f64> = supply.iter().zip(demand).map(|(a, b)| a - b).collect();
    let mut offsets: Vec<(f64, Vec<isize>)> = (0..n)
        .map(|flat| {
            let mut idx = vec![0usize; grid.dim()];
            grid.unflatten(flat, &mut idx);
            let half = grid.points() / 2;
            let off: Vec<isize> = idx
                .iter()
                .map(|&i| if i > half { i as isize - grid.points() as isize } else { i as isize })
                .collect();
            let len = off.iter().map(|&o| (o * o) as f64).sum::<f64>().sqrt() * grid.spacing();
            (len, off)
        })
        .collect();
    offsets.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite"));
    let mut cost = 0.0;
    let mut idx = vec![0usize; grid.dim()];
    let mut target = vec![0isize; grid.dim()];
    let scale = supply.iter().sum::<f64>().max(1e-300);
    for (len, off) in offsets.iter().skip(1) {
        let mut remaining = false;
        for i in 0..n {
            if excess[i] <= 0.0 {
                continue;
            }
            grid.unflatten(i, &mut idx);
            for a in 0..grid.dim() {
                target[a] = idx[a] as isize + off[a];
            }
            let j = grid.flatten(&target);
            if excess[j] < 0.0 {
                let moved = excess[i].min(-excess[j]);
                excess[i] -= moved;
                excess[j] += moved;
                cost += moved * len;
            }
            if excess[i] > 1e-15 * scale {
                remaining = true;
            }
        }
        if !remaining {
            break;
        }
    }
    cost
}

/// Sandwich bounds on `W_1`: the lower bound pairs against normalized
/// Fourier modes (all 1-Lipschitz), the upper bound is the cost of an
/// explicit plan through the grid nodes.
pub fn w1_bound<'a, 'b>(mu: impl Into<Measure<'a>>, nu: impl Into<Measure<'b>>) -> Result<W1Bounds> {
    let (mu, nu) = (mu.into(), nu.into());
    let dim = mu.dim();
    if nu.dim() != dim {
        return Err(Error::shape("measures live on tori of different dimension"));
    }
    let grid = match (mu, nu) {
        (Measure::Density(a), Measure::Density(b)) => {
            a.grid().check_same(b.grid())?;
            *a.grid()
        }
        (Measure::Density(a), _) | (_, Measure::Density(a)) => *a.grid(),
        _ => bound_grid(dim)?,
    };
    let mixed = matches!(
        (mu, nu),
        (Measure::Density(_), Measure::Empirical(_)) | (Measure::Empirical(_), Measure::Density(_))
    );
    let (a, ca) = node_masses(mu, &grid, mixed);
    let (b, cb) = node_masses(nu, &grid, mixed);
    let upper = ca + cb + greedy_transport(&grid, &a, &b);
    let lower = lipschitz_lower(mu, nu, dim).min(upper);
    Ok(W1Bounds { lower, upper })
}

/// Projection bandwidth tying the smoothing scale to the mollifier.
pub fn default_bandwidth(grid: &TorusGrid, epsilon: f64) -> f64 {
    (2.0 * grid.spacing()).max(0.5 * epsilon)
}

/// Kernel density estimate with the bump profile at scale `bandwidth`.
/// Each atom is normalized on its own so the result is translation
/// equivariant on grid-aligned shifts.
pub fn project_to_grid(em: &EmpiricalMeasure, grid: &TorusGrid, bandwidth: f64) -> Result<DensityField> {
    if em.dim() != grid.dim() {
        return Err(Error::shape("atoms and grid have different dimension"));
    }
    if !(bandwidth >= grid.spacing()) {
        return Err(Error::Resolution(format!(
            "bandwidth {bandwidth} below grid spacing {}",
            grid.spacing()
        )));
    }
    let b2 = bandwidth * bandwidth;
    let kernel = |z: &[f64]| bump_profile(z.iter().map(|v| v * v).sum::<f64>() / b2);
    let vol = grid.cell_volume();
    let w = em.weight();
    let mut out = vec![0.0; grid.node_count()];
    let mut one = vec![0.0; grid.node_count()];
    for x in em.iter() {
        one.iter_mut().for_each(|v| *v = 0.0);
        splat(grid, x, bandwidth, 1.0, kernel, &mut one);
        let mass: f64 = one.iter().sum::<f64>() * vol;
        let scale = w / mass;
        for (o, v) in out.iter_mut().zip(&one) {
            *o += scale * v;
        }
    }
    DensityField::new(ScalarField::spatial(*grid, out)?)
}

/// Inverse-CDF draws from a grid density, using a caller-supplied stream.
pub fn sample_with(m: &DensityField, count: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let grid = m.grid();
    let vol = grid.cell_volume();
    let mut cdf = Vec::with_capacity(m.values().len());
    let mut acc = 0.0;
    for v in m.values() {
        acc += v * vol;
        cdf.push(acc);
    }
    let total = acc;
    let h = grid.spacing();
    (0..count)
        .map(|_| {
            // row-major order makes one draw equivalent to sampling each
            // axis from its conditional law
            let u: f64 = rng.random::<f64>() * total;
            let mut cell = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            while m.values()[cell] == 0.0 && cell + 1 < cdf.len() {
                cell += 1;
            }
            (0..grid.dim())
                .map(|a| {
                    let off: f64 = rng.random::<f64>() - 0.5;
                    wrap((grid.axis_index(cell, a) as f64 + off) * h)
                })
                .collect()
        })
        .collect()
}

/// `count` iid draws from `m`, deterministic in `seed`.
pub fn sample(m: &DensityField, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        return Err(Error::param("sample count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_with(m, count, &mut rng))
}

/// Random positive trigonometric density with a few low modes.
pub fn random_smooth_density(grid: &TorusGrid, seed: u64) -> DensityField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modes: Vec<(Vec<f64>, f64, f64)> = (0..3)
        .map(|_| {
            let n: Vec<f64> = (0..grid.dim()).map(|_| rng.random_range(-3i32..=3) as f64).collect();
            (n, rng.random_range(0.0..1.0), rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let raw = grid.sample(|x| {
        modes
            .iter()
            .map(|(n, a, ph)| a * (2.0 * PI * n.iter().zip(x).map(|(k, v)| k * v).sum::<f64>() + ph).cos())
            .sum()
    });
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let floor: f64 = rng.random_range(0.05..0.5);
    let values: Vec<f64> = raw.iter().map(|v| v - lo + floor).collect();
    DensityField::normalized(ScalarField::spatial(*grid, values).expect("finite"))
        .expect("positive field")
}

/// One atom per row, coordinates comma separated.
pub fn write_atoms_csv(path: &Path, atoms: &EmpiricalMeasure) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for a in atoms.iter() {
        let row: Vec<String> = a.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn read_atoms_csv(path: &Path) -> Result<EmpiricalMeasure> {
    let text = fs::read_to_string(path)?;
    let mut points = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse::<f64>()).collect();
        match row {
            Ok(r) => points.push(r),
            // tolerate a header line
            Err(_) if line_no == 0 => continue,
            Err(e) => return Err(Error::Config(format!("line {}: {e}", line_no + 1))),
        }
    }
    EmpiricalMeasure::from_points(points)
}
