//! Truncated grids on `R^d` and the function-space norms used to track
//! regularity of densities: the weighted `L¹_α` norm, the oscillation
//! seminorm against a reference probability `ψ`, and their sum `BV_α`.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid of `m^d` cells on the cube `[-L, L]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    dim: usize,
    half_width: f64,
    cells_per_axis: usize,
}

impl GridSpec {
    pub fn new(dim: usize, half_width: f64, cells_per_axis: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("grid dimension must be positive".into()));
        }
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::InvalidArgument(format!("grid half-width must be positive, got {half_width}")));
        }
        if cells_per_axis < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 cells per axis, got {cells_per_axis}")));
        }
        Ok(Self { dim, half_width, cells_per_axis })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn cells_per_axis(&self) -> usize {
        self.cells_per_axis
    }

    pub fn len(&self) -> usize {
        self.cells_per_axis.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cell_width(&self) -> f64 {
        2.0 * self.half_width / self.cells_per_axis as f64
    }

    /// `(2L/m)^d`
    pub fn cell_volume(&self) -> f64 {
        self.cell_width().powi(self.dim as i32)
    }

    /// Centre coordinate of cell `i` along one axis.
    pub fn axis_center(&self, i: usize) -> f64 {
        -self.half_width + (i as f64 + 0.5) * self.cell_width()
    }

    /// Per-axis indices of a flat cell index; the last axis varies fastest.
    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let m = self.cells_per_axis;
        let mut idx = vec![0; self.dim];
        for slot in idx.iter_mut().rev() {
            *slot = flat % m;
            flat /= m;
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().fold(0, |acc, &i| acc * self.cells_per_axis + i)
    }

    pub fn center(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat).into_iter().map(|i| self.axis_center(i)).collect()
    }

    pub fn centers(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.center(i)).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim && x.iter().all(|v| v.abs() <= self.half_width)
    }

    /// Cell whose closed box contains `x`, if inside the grid.
    pub fn cell_of(&self, x: &[f64]) -> Option<usize> {
        if !self.contains(x) {
            return None;
        }
        let w = self.cell_width();
        let idx: Vec<usize> = x
            .iter()
            .map(|v| (((v + self.half_width) / w).floor() as usize).min(self.cells_per_axis - 1))
            .collect();
        Some(self.flat_index(&idx))
    }

    /// Cells whose centre lies in the open ball `B(center, radius)`.
    pub fn cells_in_ball(&self, center: &[f64], radius: f64) -> Vec<usize> {
        let r2 = radius * radius;
        (0..self.len())
            .filter(|&i| {
                let c = self.center(i);
                c.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() < r2
            })
            .collect()
    }

    /// Integer offsets `o` with `|o| w <= eps`, the stencil of a ball of
    /// radius `eps` around a cell centre.
    fn ball_stencil(&self, eps: f64) -> Vec<Vec<isize>> {
        let w = self.cell_width();
        let reach = (eps / w * (1.0 + 1e-9)).floor() as isize;
        let limit = (eps * (1.0 + 1e-9) / w).powi(2);
        let mut out = Vec::new();
        let mut cur = vec![-reach; self.dim];
        loop {
            let n2: f64 = cur.iter().map(|&o| (o * o) as f64).sum();
            if n2 <= limit {
                out.push(cur.clone());
            }
            // odometer increment
            let mut axis = self.dim;
            loop {
                if axis == 0 {
                    return out;
                }
                axis -= 1;
                if cur[axis] < reach {
                    cur[axis] += 1;
                    break;
                }
                cur[axis] = -reach;
            }
        }
    }

    fn shifted(&self, idx: &[usize], off: &[isize]) -> Option<usize> {
        let m = self.cells_per_axis as isize;
        let mut flat = 0usize;
        for (&i, &o) in idx.iter().zip(off) {
            let j = i as isize + o;
            if j < 0 || j >= m {
                return None;
            }
            flat = flat * self.cells_per_axis + j as usize;
        }
        Some(flat)
    }
}

/// Value type stored on a grid: real or complex.
pub trait CellValue: Copy + Send + Sync + std::fmt::Debug + 'static {
    fn modulus(self) -> f64;
    /// `esssup - essinf` for reals, `sup |f(x) - f(y)|` for complex values.
    fn oscillation(values: &[Self]) -> f64;
}

impl CellValue for f64 {
    fn modulus(self) -> f64 {
        self.abs()
    }

    fn oscillation(values: &[Self]) -> f64 {
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if values.is_empty() {
            0.0
        } else {
            hi - lo
        }
    }
}

impl CellValue for Complex64 {
    fn modulus(self) -> f64 {
        self.norm()
    }

    fn oscillation(values: &[Self]) -> f64 {
        let mut best = 0.0_f64;
        for (i, a) in values.iter().enumerate() {
            for b in &values[i + 1..] {
                best = best.max((a - b).norm());
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionKind {
    /// Nonnegative with unit mass.
    Density,
    Generic,
}

/// Cellwise-constant function on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction<T = f64> {
    grid: GridSpec,
    values: Vec<T>,
    kind: FunctionKind,
}

pub const DENSITY_MASS_TOL: f64 = 1e-9;

impl<T: CellValue> GridFunction<T> {
    pub fn generic(grid: GridSpec, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "grid has {} cells but {} values were given",
                grid.len(),
                values.len()
            )));
        }
        Ok(Self { grid, values, kind: FunctionKind::Generic })
    }

    pub fn from_fn(grid: &GridSpec, f: impl Fn(&[f64]) -> T) -> Self {
        let values = (0..grid.len()).map(|i| f(&grid.center(i))).collect();
        Self { grid: grid.clone(), values, kind: FunctionKind::Generic }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn kind(&self) -> FunctionKind {
        self.kind
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    /// `Σ |f| · vol`
    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.modulus()).sum::<f64>() * self.grid.cell_volume()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|v| v.modulus()).fold(0.0, f64::max)
    }
}

impl GridFunction<f64> {
    /// Density-kind function; values must be nonnegative with unit mass.
    pub fn density(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        let mut f = Self::generic(grid, values)?;
        if f.values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument("density has negative or NaN values".into()));
        }
        let mass = f.mass();
        if (mass - 1.0).abs() > DENSITY_MASS_TOL {
            return Err(Error::InvalidArgument(format!("density mass {mass} differs from 1")));
        }
        f.kind = FunctionKind::Density;
        Ok(f)
    }

    /// Rescales nonnegative values to unit mass.
    pub fn normalized_density(grid: GridSpec, mut values: Vec<f64>) -> Result<Self> {
        let mass = values.iter().sum::<f64>() * grid.cell_volume();
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::InvalidArgument(format!("cannot normalize values with mass {mass}")));
        }
        values.iter_mut().for_each(|v| *v /= mass);
        Self::density(grid, values)
    }

    /// `Σ f · vol`
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| c * v).collect(),
            kind: FunctionKind::Generic,
        }
    }

    pub fn sum(&self, other: &Self) -> Result<Self> {
        if self.grid != other.grid {
            return Err(Error::InvalidArgument("functions live on different grids".into()));
        }
        Ok(Self {
            grid: self.grid.clone(),
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
            kind: FunctionKind::Generic,
        })
    }
}

/// Probability `ψ` with a continuous, bounded, strictly positive density.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceMeasure {
    grid: GridSpec,
    density: Vec<f64>,
}

impl ReferenceMeasure {
    /// Standard Gaussian restricted to the box and renormalized.
    pub fn gaussian(grid: &GridSpec) -> Self {
        let mut density: Vec<f64> = (0..grid.len())
            .map(|i| (-0.5 * grid.center(i).iter().map(|v| v * v).sum::<f64>()).exp())
            .collect();
        let mass = density.iter().sum::<f64>() * grid.cell_volume();
        density.iter_mut().for_each(|v| *v /= mass);
        Self { grid: grid.clone(), density }
    }

    pub fn from_density(grid: &GridSpec, density: Vec<f64>) -> Result<Self> {
        if density.len() != grid.len() {
            return Err(Error::InvalidArgument("reference density has wrong length".into()));
        }
        if density.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("reference density must be strictly positive and finite".into()));
        }
        let mass = density.iter().sum::<f64>() * grid.cell_volume();
        if (mass - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("reference measure has mass {mass}, expected 1")));
        }
        Ok(Self { grid: grid.clone(), density })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn sup_density(&self) -> f64 {
        self.density.iter().copied().fold(0.0, f64::max)
    }

    /// `ψ(B_r(x))` for the cell centre `x` of `cell` (cells with centre at
    /// distance `<= r`).
    pub fn ball_mass(&self, cell: usize, r: f64) -> f64 {
        let idx = self.grid.multi_index(cell);
        let vol = self.grid.cell_volume();
        self.grid
            .ball_stencil(r)
            .iter()
            .filter_map(|off| self.grid.shifted(&idx, off))
            .map(|j| self.density[j] * vol)
            .sum()
    }
}

/// `ρ_α(|x|) = (1 + |x|²)^{α/2}`
pub fn weight(x: &[f64], alpha: f64) -> f64 {
    (1.0 + x.iter().map(|v| v * v).sum::<f64>()).powf(alpha / 2.0)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha >= 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("alpha must be >= 0, got {alpha}")))
    }
}

/// `Σ ρ_α(centre) |f| vol`
pub fn weighted_l1_norm<T: CellValue>(f: &GridFunction<T>, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let grid = f.grid();
    let vol = grid.cell_volume();
    Ok(f.values()
        .iter()
        .enumerate()
        .map(|(i, v)| weight(&grid.center(i), alpha) * v.modulus())
        .sum::<f64>()
        * vol)
}

/// `{1, 1/2, 1/4, ...}` down to `max(cell width, 1/64)`.
pub fn default_eps_list(grid: &GridSpec) -> Vec<f64> {
    let floor = grid.cell_width().max(1.0 / 64.0);
    let mut out = Vec::new();
    let mut eps = 1.0;
    while eps >= floor * (1.0 - 1e-12) {
        out.push(eps);
        eps /= 2.0;
    }
    out
}

/// `sup_{ε ∈ eps_list} ε^{-1} Σ_x osc(f, B_ε(x)) ψ'(x) vol`, where the ball
/// around a cell centre collects every cell whose centre lies within `ε`.
pub fn oscillation_seminorm<T: CellValue>(f: &GridFunction<T>, psi: &ReferenceMeasure, eps_list: &[f64]) -> Result<f64> {
    let grid = f.grid();
    if psi.grid() != grid {
        return Err(Error::InvalidArgument("reference measure lives on a different grid".into()));
    }
    if eps_list.is_empty() {
        return Err(Error::InvalidArgument("empty oscillation radius list".into()));
    }
    let width = grid.cell_width();
    for &eps in eps_list {
        if !(eps <= 1.0 && eps > 0.0) {
            return Err(Error::InvalidArgument(format!("oscillation radius {eps} is outside (0, 1]")));
        }
        if eps < width * (1.0 - 1e-12) {
            return Err(Error::RadiusBelowCell { eps, width });
        }
    }
    let vol = grid.cell_volume();
    let values = f.values();
    let mut best = 0.0_f64;
    for &eps in eps_list {
        let stencil = grid.ball_stencil(eps);
        let total: f64 = (0..grid.len())
            .into_par_iter()
            .map_init(Vec::new, |buf, i| {
                let idx = grid.multi_index(i);
                buf.clear();
                buf.extend(stencil.iter().filter_map(|off| grid.shifted(&idx, off)).map(|j| values[j]));
                T::oscillation(buf) * psi.density()[i]
            })
            .collect::<Vec<f64>>()
            .iter()
            .sum();
        best = best.max(total * vol / eps);
    }
    Ok(best)
}

/// Weighted `L¹_α` norm, oscillation seminorm and reference measure used to
/// evaluate `BV_α` norms.
#[derive(Debug, Clone)]
pub struct SpacesContext {
    pub alpha: f64,
    pub psi: ReferenceMeasure,
    pub eps_list: Vec<f64>,
}

impl SpacesContext {
    /// `α = 2`, Gaussian `ψ` and the default dyadic radius ladder.
    pub fn standard(grid: &GridSpec) -> Self {
        Self {
            alpha: 2.0,
            psi: ReferenceMeasure::gaussian(grid),
            eps_list: default_eps_list(grid),
        }
    }

    pub fn bv_norm<T: CellValue>(&self, f: &GridFunction<T>) -> Result<f64> {
        bv_norm(f, self.alpha, &self.psi, &self.eps_list)
    }
}

/// `‖f‖_{L¹_α} + ‖f‖_osc`
pub fn bv_norm<T: CellValue>(f: &GridFunction<T>, alpha: f64, psi: &ReferenceMeasure, eps_list: &[f64]) -> Result<f64> {
    Ok(weighted_l1_norm(f, alpha)? + oscillation_seminorm(f, psi, eps_list)?)
}

/// Sup over cells and axes of the forward difference quotient.
pub fn fd_gradient_sup(f: &GridFunction<f64>) -> f64 {
    let grid = f.grid();
    let w = grid.cell_width();
    let m = grid.cells_per_axis();
    let values = f.values();
    let mut best = 0.0_f64;
    for i in 0..grid.len() {
        let idx = grid.multi_index(i);
        for axis in 0..grid.dim() {
            if idx[axis] + 1 < m {
                let mut next = idx.clone();
                next[axis] += 1;
                let j = grid.flat_index(&next);
                best = best.max((values[j] - values[i]).abs() / w);
            }
        }
    }
    best
}

/// Axis-aligned box `[lo_i, hi_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl CompactBox {
    pub fn cube(dim: usize, half_width: f64) -> Self {
        Self { lo: vec![-half_width; dim], hi: vec![half_width; dim] }
    }

    fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.lo).zip(&self.hi).all(|((v, lo), hi)| *v >= *lo && *v <= *hi)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupBoundReport {
    /// Grid sup of `|f|` over cells with centre in the box.
    pub lhs: f64,
    /// `max(‖ψ'‖_∞, 1) / d_K · ‖f‖_{BV_α}`
    pub bound: f64,
    /// `min_{x ∈ K} ψ(B_1(x))`
    pub d_k: f64,
    pub slack: f64,
    pub pass: bool,
}

/// Checks the sup-norm control of `BV_α` functions on a compact box.
pub fn sup_bound_check(f: &GridFunction<f64>, ctx: &SpacesContext, region: &CompactBox) -> Result<SupBoundReport> {
    let grid = f.grid();
    if region.lo.len() != grid.dim() || region.hi.len() != grid.dim() {
        return Err(Error::InvalidArgument("box dimension does not match the grid".into()));
    }
    let h = grid.half_width();
    if region.lo.iter().chain(&region.hi).any(|v| v.abs() > h) {
        return Err(Error::InvalidArgument("box is not inside the grid".into()));
    }
    let cells: Vec<usize> = (0..grid.len()).filter(|&i| region.contains(&grid.center(i))).collect();
    if cells.is_empty() {
        return Err(Error::InvalidArgument("box contains no cell centre".into()));
    }
    let lhs = cells.iter().map(|&i| f.values()[i].abs()).fold(0.0, f64::max);
    let d_k = cells
        .par_iter()
        .map(|&i| ctx.psi.ball_mass(i, 1.0))
        .reduce(|| f64::INFINITY, f64::min);
    let norm = ctx.bv_norm(f)?;
    let bound = ctx.psi.sup_density().max(1.0) / d_k * norm;
    Ok(SupBoundReport { lhs, bound, d_k, slack: bound - lhs, pass: lhs <= bound })
}
