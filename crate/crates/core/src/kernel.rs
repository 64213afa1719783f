//! Transition densities `S_t(x, y)` of the SDE, the noiseless flow `θ_t`
//! and two-sided Gaussian (Aronson-type) bound checks.
//!
//! For `b(x) = -x` the density is known in closed form. For other drifts it
//! is realized on a grid by Chapman-Kolmogorov composition of short-time
//! Gaussians obtained by linearizing the drift around each source point.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::sde::{ou_step_variance, DriftModel, State};
use crate::spaces::{GridFunction, GridSpec};

/// Maximum tolerated mass loss through the grid boundary.
pub const MAX_TRUNCATION_LOSS: f64 = 0.01;

/// Largest substep used by default when composing short-time kernels.
pub const DEFAULT_MAX_SUBSTEP: f64 = 0.05;

/// Number of composition substeps so that `t / s <= 0.05`.
pub fn default_substeps(t: f64) -> usize {
    ((t / DEFAULT_MAX_SUBSTEP) - 1e-12).ceil().max(1.0) as usize
}

/// `θ_t(x)` by classical RK4 with step `0.01 / max(K, 1)`.
pub fn deterministic_flow(model: &DriftModel, x: &[f64], t: f64) -> Result<State> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::InvalidArgument(format!("flow time must be >= 0, got {t}")));
    }
    if x.len() != model.dim() {
        return Err(Error::InvalidArgument("flow start point has the wrong dimension".into()));
    }
    let steps = (t * model.lipschitz().max(1.0) / 0.01).ceil() as usize;
    let mut y = x.to_vec();
    if steps == 0 {
        return Ok(y);
    }
    let dt = t / steps as f64;
    let d = y.len();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut tmp = vec![0.0; d];
    for _ in 0..steps {
        model.drift_into(&y, &mut k1);
        for i in 0..d {
            tmp[i] = y[i] + 0.5 * dt * k1[i];
        }
        model.drift_into(&tmp, &mut k2);
        for i in 0..d {
            tmp[i] = y[i] + 0.5 * dt * k2[i];
        }
        model.drift_into(&tmp, &mut k3);
        for i in 0..d {
            tmp[i] = y[i] + dt * k3[i];
        }
        model.drift_into(&tmp, &mut k4);
        for i in 0..d {
            y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteDrift { point: x.to_vec() });
    }
    Ok(y)
}

/// Exact transition density of `dX = -X dt + dW`.
pub fn ou_transition_density(x: &[f64], y: &[f64], t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("transition time must be positive, got {t}")));
    }
    if x.len() != y.len() {
        return Err(Error::InvalidArgument("points have different dimensions".into()));
    }
    let var = ou_step_variance(t);
    let decay = (-t).exp();
    let q: f64 = x.iter().zip(y).map(|(a, b)| (b - decay * a).powi(2)).sum();
    Ok((2.0 * std::f64::consts::PI * var).powf(-(x.len() as f64) / 2.0) * (-q / (2.0 * var)).exp())
}

/// Gaussian approximation of the law of `X_δ` started at a point.
#[derive(Debug, Clone)]
pub struct GaussianStep {
    pub mean: State,
    pub covariance: DMatrix<f64>,
    precision: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianStep {
    fn new(mean: State, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        let chol = covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("short-time covariance is not positive definite".into()))?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let precision = chol.inverse();
        let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(Self { mean, covariance, precision, log_norm })
    }

    pub fn density(&self, y: &[f64]) -> f64 {
        let z = DVector::from_iterator(y.len(), y.iter().zip(&self.mean).map(|(a, b)| a - b));
        (self.log_norm - 0.5 * (z.transpose() * &self.precision * &z)[(0, 0)]).exp()
    }
}

fn jacobian(model: &DriftModel, x: &[f64]) -> DMatrix<f64> {
    let d = x.len();
    let mut jac = DMatrix::zeros(d, d);
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; d];
    let mut fm = vec![0.0; d];
    for k in 0..d {
        let step = 1e-6 * x[k].abs().max(1.0);
        xp[k] = x[k] + step;
        model.drift_into(&xp, &mut fp);
        xp[k] = x[k] - step;
        model.drift_into(&xp, &mut fm);
        xp[k] = x[k];
        for i in 0..d {
            jac[(i, k)] = (fp[i] - fm[i]) / (2.0 * step);
        }
    }
    jac
}

/// Short-time Gaussian for `X_δ` from `x`, obtained by linearizing the drift
/// at `x`: `b(y) ≈ b(x) + J (y - x)`. The mean solves the linearized ODE and
/// the covariance is `∫_0^δ e^{Js} e^{Jᵀs} ds`. Exact for linear drifts.
pub fn short_time_gaussian(model: &DriftModel, x: &[f64], delta: f64) -> Result<GaussianStep> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArgument(format!("substep must be positive, got {delta}")));
    }
    let d = model.dim();
    let b = model.drift(x);
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteDrift { point: x.to_vec() });
    }
    let jac = jacobian(model, x);

    // [[J, b], [0, 0]] δ  ->  top-right block is ∫_0^δ e^{Js} ds · b
    let mut aug = DMatrix::zeros(d + 1, d + 1);
    aug.view_mut((0, 0), (d, d)).copy_from(&(&jac * delta));
    for i in 0..d {
        aug[(i, d)] = b[i] * delta;
    }
    let e = aug.exp();
    let mean: State = (0..d).map(|i| x[i] + e[(i, d)]).collect();

    // Van Loan: [[-J, I], [0, Jᵀ]] δ
    let mut vl = DMatrix::zeros(2 * d, 2 * d);
    vl.view_mut((0, 0), (d, d)).copy_from(&(-&jac * delta));
    vl.view_mut((0, d), (d, d)).copy_from(&(DMatrix::identity(d, d) * delta));
    vl.view_mut((d, d), (d, d)).copy_from(&(jac.transpose() * delta));
    let f = vl.exp();
    let f12 = f.view((0, d), (d, d)).into_owned();
    let f22 = f.view((d, d), (d, d)).into_owned();
    let cov = f22.transpose() * f12;
    let cov = (&cov + cov.transpose()) * 0.5;
    GaussianStep::new(mean, cov)
}

/// Column-major one-substep matrix `K[j, i] = vol · N_{x_i}(x_j)`.
fn substep_matrix(model: &DriftModel, grid: &GridSpec, delta: f64) -> Result<DMatrix<f64>> {
    let n = grid.len();
    let vol = grid.cell_volume();
    let centers = grid.centers();
    let steps: Vec<GaussianStep> = centers
        .par_iter()
        .map(|c| short_time_gaussian(model, c, delta))
        .collect::<Result<_>>()?;
    let mut data = vec![0.0; n * n];
    data.par_chunks_mut(n).zip(steps.par_iter()).for_each(|(col, step)| {
        for (j, v) in col.iter_mut().enumerate() {
            *v = vol * step.density(&centers[j]);
        }
    });
    Ok(DMatrix::from_vec(n, n, data))
}

/// Mass lost through the boundary by the worst source column.
pub fn column_loss(matrix: &DMatrix<f64>) -> f64 {
    matrix
        .column_iter()
        .map(|c| 1.0 - c.sum())
        .fold(0.0, f64::max)
}

/// Density of `X_t` started at `x`, on a grid, with its truncation loss.
#[derive(Debug, Clone)]
pub struct ComposedDensity {
    pub density: GridFunction,
    pub truncation_loss: f64,
}

/// Composes `substeps` short-time Gaussians: the first one is evaluated
/// from `x` itself, the remaining ones act as grid matrices.
pub fn composed_transition_density(
    model: &DriftModel,
    x: &[f64],
    grid: &GridSpec,
    t: f64,
    substeps: usize,
) -> Result<ComposedDensity> {
    if substeps == 0 {
        return Err(Error::InvalidArgument("substeps must be >= 1".into()));
    }
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("transition time must be positive, got {t}")));
    }
    if x.len() != grid.dim() || model.dim() != grid.dim() {
        return Err(Error::InvalidArgument("dimension mismatch between model, point and grid".into()));
    }
    let delta = t / substeps as f64;
    let first = short_time_gaussian(model, x, delta)?;
    let mut p = DVector::from_iterator(grid.len(), (0..grid.len()).map(|j| first.density(&grid.center(j))));
    if substeps > 1 {
        let k = substep_matrix(model, grid, delta)?;
        for _ in 1..substeps {
            p = &k * p;
        }
    }
    let density = GridFunction::generic(grid.clone(), p.as_slice().to_vec())?;
    let loss = (1.0 - density.mass()).max(0.0);
    if loss > MAX_TRUNCATION_LOSS {
        return Err(Error::Truncation { loss, limit: MAX_TRUNCATION_LOSS });
    }
    Ok(ComposedDensity { density, truncation_loss: loss })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum KernelMode {
    ExactOu,
    Composed { substeps: usize },
}

/// `S_t` for one drift model and time.
#[derive(Debug, Clone)]
pub struct TransitionKernel {
    model: DriftModel,
    t: f64,
    mode: KernelMode,
    /// Composed mode only: the grid and the `t`-step matrix on it.
    composed: Option<(GridSpec, DMatrix<f64>)>,
}

impl TransitionKernel {
    pub fn exact_ou(model: &DriftModel, t: f64) -> Result<Self> {
        if !model.is_linear_ou() {
            return Err(Error::InvalidArgument(format!(
                "exact OU kernel requested for non-OU model '{}'",
                model.name()
            )));
        }
        if !(t > 0.0) {
            return Err(Error::InvalidArgument(format!("transition time must be positive, got {t}")));
        }
        Ok(Self { model: model.clone(), t, mode: KernelMode::ExactOu, composed: None })
    }

    /// Builds `K_{t/s}^s` on the grid.
    pub fn composed(model: &DriftModel, t: f64, substeps: usize, grid: &GridSpec) -> Result<Self> {
        if substeps == 0 {
            return Err(Error::InvalidArgument("substeps must be >= 1".into()));
        }
        if !(t > 0.0) {
            return Err(Error::InvalidArgument(format!("transition time must be positive, got {t}")));
        }
        if model.dim() != grid.dim() {
            return Err(Error::InvalidArgument("model and grid dimensions differ".into()));
        }
        let step = substep_matrix(model, grid, t / substeps as f64)?;
        let mut m = step.clone();
        for _ in 1..substeps {
            m = &step * m;
        }
        Ok(Self {
            model: model.clone(),
            t,
            mode: KernelMode::Composed { substeps },
            composed: Some((grid.clone(), m)),
        })
    }

    pub fn new(model: &DriftModel, t: f64, mode: KernelMode, grid: &GridSpec) -> Result<Self> {
        match mode {
            KernelMode::ExactOu => Self::exact_ou(model, t),
            KernelMode::Composed { substeps } => Self::composed(model, t, substeps, grid),
        }
    }

    pub fn model(&self) -> &DriftModel {
        &self.model
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn mode(&self) -> KernelMode {
        self.mode
    }

    /// `S_t(x, y)`. In composed mode both points are snapped to their cells.
    pub fn density(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        match &self.composed {
            None => ou_transition_density(x, y, self.t),
            Some((grid, m)) => {
                let (Some(i), Some(j)) = (grid.cell_of(x), grid.cell_of(y)) else {
                    return Err(Error::InvalidArgument("point outside the kernel grid".into()));
                };
                Ok(m[(j, i)] / grid.cell_volume())
            }
        }
    }

    /// Collocation matrix `M[j, i] = vol · S_t(x_i, x_j)` on `grid`.
    pub fn grid_matrix(&self, grid: &GridSpec) -> Result<DMatrix<f64>> {
        match &self.composed {
            Some((g, m)) if g == grid => Ok(m.clone()),
            Some(_) => Err(Error::InvalidArgument("composed kernel was built on a different grid".into())),
            None => {
                let n = grid.len();
                let vol = grid.cell_volume();
                let centers = grid.centers();
                let t = self.t;
                let mut data = vec![0.0; n * n];
                data.par_chunks_mut(n).enumerate().for_each(|(i, col)| {
                    for (j, v) in col.iter_mut().enumerate() {
                        *v = vol * ou_transition_density(&centers[i], &centers[j], t).unwrap_or(0.0);
                    }
                });
                if grid.dim() != self.model.dim() {
                    return Err(Error::InvalidArgument("model and grid dimensions differ".into()));
                }
                Ok(DMatrix::from_vec(n, n, data))
            }
        }
    }
}

/// `g_λ(t, z) = t^{-d/2} exp(-λ |z|² / t)`
pub fn gaussian_bound(lambda: f64, t: f64, z: &[f64]) -> f64 {
    let r2: f64 = z.iter().map(|v| v * v).sum();
    t.powf(-(z.len() as f64) / 2.0) * (-lambda * r2 / t).exp()
}

/// Proposed constants `λ₀ ∈ (0, 1]`, `C₀ >= 1` for the two-sided bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AronsonConstants {
    lambda0: f64,
    c0: f64,
}

impl AronsonConstants {
    pub fn new(lambda0: f64, c0: f64) -> Result<Self> {
        if !(lambda0 > 0.0 && lambda0 <= 1.0) {
            return Err(Error::InvalidArgument(format!("lambda0 must lie in (0, 1], got {lambda0}")));
        }
        if !(c0 >= 1.0 && c0.is_finite()) {
            return Err(Error::InvalidArgument(format!("C0 must be >= 1, got {c0}")));
        }
        Ok(Self { lambda0, c0 })
    }

    pub fn lambda0(&self) -> f64 {
        self.lambda0
    }

    pub fn c0(&self) -> f64 {
        self.c0
    }

    /// `(C₀⁻¹ g_{1/λ₀}(t, z), C₀ g_{λ₀}(t, z))`
    pub fn bounds(&self, t: f64, z: &[f64]) -> (f64, f64) {
        (
            gaussian_bound(1.0 / self.lambda0, t, z) / self.c0,
            self.c0 * gaussian_bound(self.lambda0, t, z),
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AronsonViolation {
    pub x: State,
    pub y: State,
    pub density: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AronsonReport {
    pub pairs: usize,
    pub violations: Vec<AronsonViolation>,
    /// Pairs with `S_t(x,y) < 0`; always expected to be empty.
    pub negative: usize,
}

impl AronsonReport {
    pub fn pass(&self) -> bool {
        self.violations.is_empty() && self.negative == 0
    }
}

/// `count` pairs drawn uniformly from `[-radius, radius]^d`.
pub fn sample_pairs(dim: usize, count: usize, radius: f64, seed: u64) -> Vec<(State, State)> {
    let mut rng = rng::stream(seed, 0);
    (0..count)
        .map(|_| {
            let x = (0..dim).map(|_| rng.random_range(-radius..=radius)).collect();
            let y = (0..dim).map(|_| rng.random_range(-radius..=radius)).collect();
            (x, y)
        })
        .collect()
}

/// Evaluates both Gaussian bounds around `θ_t(x)` on every pair.
pub fn check_aronson(kernel: &TransitionKernel, constants: &AronsonConstants, pairs: &[(State, State)]) -> Result<AronsonReport> {
    let t = kernel.time();
    let checked: Vec<(f64, Option<AronsonViolation>)> = pairs
        .par_iter()
        .map(|(x, y)| {
            let s = kernel.density(x, y)?;
            let flow = deterministic_flow(kernel.model(), x, t)?;
            let z: Vec<f64> = flow.iter().zip(y).map(|(a, b)| a - b).collect();
            let (lower, upper) = constants.bounds(t, &z);
            let bad = (s < lower || s > upper).then(|| AronsonViolation {
                x: x.clone(),
                y: y.clone(),
                density: s,
                lower,
                upper,
            });
            Ok((s, bad))
        })
        .collect::<Result<_>>()?;
    Ok(AronsonReport {
        pairs: pairs.len(),
        negative: checked.iter().filter(|(s, _)| *s < 0.0).count(),
        violations: checked.into_iter().filter_map(|(_, v)| v).collect(),
    })
}

/// Worst L¹ defect between `M_t M_t` and `M_{2t}` over source columns whose
/// centre lies in the inner half of the box, away from boundary leakage.
pub fn semigroup_defect(kernel_t: &TransitionKernel, kernel_2t: &TransitionKernel, grid: &GridSpec) -> Result<f64> {
    let m = kernel_t.grid_matrix(grid)?;
    let m2 = kernel_2t.grid_matrix(grid)?;
    let diff = &m * &m - m2;
    let inner = 0.5 * grid.half_width();
    Ok((0..grid.len())
        .filter(|&i| grid.center(i).iter().all(|c| c.abs() <= inner))
        .map(|i| diff.column(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max))
}

/// Writes `x_1, ..., x_d, value` rows for every cell.
pub fn write_density_csv(path: &Path, f: &GridFunction) -> Result<()> {
    let grid = f.grid();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (1..=grid.dim()).map(|i| format!("x{i}")).chain(["value".to_string()]).collect();
    writeln!(out, "{}", header.join(","))?;
    for (i, v) in f.values().iter().enumerate() {
        let row: Vec<String> = grid.center(i).iter().map(|c| c.to_string()).chain([v.to_string()]).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}
