use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{TransferMatrix, TwistedMatrix};
use crate::error::{Error, Result};
use crate::spaces::GridFunction;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerOptions {
    /// Stop once successive iterates (or eigenvalue estimates) move less than this.
    pub tolerance: f64,
    /// Stop once `‖Mv - λv‖₁ / ‖v‖₁` falls below this.
    pub residual_tolerance: f64,
    pub max_iter: usize,
}

impl Default for PowerOptions {
    fn default() -> Self {
        Self { tolerance: 1e-10, residual_tolerance: 1e-9, max_iter: 100_000 }
    }
}

#[derive(Debug, Clone)]
pub struct SpectralResult<T = f64> {
    pub eigenvalue: Complex64,
    /// Cell values with `Σ |v_i| = 1`.
    pub eigenfunction: GridFunction<T>,
    /// `‖Mv - λv‖₁ / ‖v‖₁`
    pub residual: f64,
    pub iterations: usize,
}

fn l1(v: &DVector<f64>) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

fn l1c(v: &DVector<Complex64>) -> f64 {
    v.iter().map(|x| x.norm()).sum()
}

/// Fixed point of the plain matrix by power iteration from the uniform
/// density, renormalizing to unit mass each step.
pub fn invariant_density(m: &TransferMatrix, opts: &PowerOptions) -> Result<SpectralResult> {
    if m.hole().is_some() {
        return Err(Error::InvalidArgument("invariant density needs the plain matrix".into()));
    }
    let n = m.grid().len();
    let a = m.matrix();
    let mut v = DVector::from_element(n, 1.0 / n as f64);
    let mut change = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let mv = a * &v;
        let mass = mv.sum();
        if !(mass > 0.0) {
            return Err(Error::InvalidArgument("transfer matrix annihilates the iterate".into()));
        }
        let next = mv / mass;
        change = l1(&(&next - &v));
        v = next;
        let residual = l1(&(a * &v - &v)) / l1(&v);
        if change < opts.tolerance || residual < opts.residual_tolerance {
            let f = GridFunction::normalized_density(m.grid().clone(), v.as_slice().to_vec())?;
            return Ok(SpectralResult { eigenvalue: Complex64::new(1.0, 0.0), eigenfunction: f, residual, iterations: it });
        }
    }
    Err(Error::NoConvergence { iterations: opts.max_iter, gap: change })
}

/// Leading eigenpair of a plain or holed matrix; the eigenvalue is the
/// asymptotic ratio `‖Mv‖₁ / ‖v‖₁`.
pub fn leading_eigenvalue(m: &TransferMatrix, opts: &PowerOptions) -> Result<SpectralResult> {
    let n = m.grid().len();
    let a = m.matrix();
    let mut v = DVector::from_element(n, 1.0 / n as f64);
    let mut prev = f64::NAN;
    let mut gap = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let mv = a * &v;
        let norm = l1(&mv);
        if norm == 0.0 {
            let f = GridFunction::generic(m.grid().clone(), v.as_slice().to_vec())?;
            return Ok(SpectralResult { eigenvalue: Complex64::new(0.0, 0.0), eigenfunction: f, residual: 0.0, iterations: it });
        }
        let lambda = norm / l1(&v);
        v = mv / norm;
        gap = (lambda - prev).abs();
        prev = lambda;
        let residual = l1(&(a * &v - &v * lambda));
        if gap < opts.tolerance && residual < opts.residual_tolerance.max(10.0 * opts.tolerance) {
            let f = GridFunction::generic(m.grid().clone(), v.as_slice().to_vec())?;
            return Ok(SpectralResult { eigenvalue: Complex64::new(lambda, 0.0), eigenfunction: f, residual, iterations: it });
        }
    }
    Err(Error::NoConvergence { iterations: opts.max_iter, gap })
}

/// Leading left eigenvector `Mᵀ u = λ u`, normalized to `max |u| = 1`.
pub fn left_eigenvector(m: &TransferMatrix, opts: &PowerOptions) -> Result<(f64, Vec<f64>)> {
    let n = m.grid().len();
    let a = m.matrix();
    let mut u = DVector::from_element(n, 1.0);
    let mut prev = f64::NAN;
    let mut gap = f64::INFINITY;
    for _ in 0..opts.max_iter {
        let mu = a.tr_mul(&u);
        let norm = mu.amax();
        if norm == 0.0 {
            return Ok((0.0, u.as_slice().to_vec()));
        }
        let lambda = norm / u.amax();
        u = mu / norm;
        gap = (lambda - prev).abs();
        prev = lambda;
        if gap < opts.tolerance {
            let residual = (a.tr_mul(&u) - &u * lambda).amax();
            if residual < opts.residual_tolerance.max(10.0 * opts.tolerance) {
                return Ok((lambda, u.as_slice().to_vec()));
            }
        }
    }
    Err(Error::NoConvergence { iterations: opts.max_iter, gap })
}

/// Leading eigenvalue of a twisted matrix with the complex ratio
/// `Σ (Mv)_i / Σ v_i`.
pub fn leading_eigenvalue_twisted(m: &TwistedMatrix, opts: &PowerOptions) -> Result<SpectralResult<Complex64>> {
    let n = m.grid().len();
    let a = m.matrix();
    let mut v = DVector::from_element(n, Complex64::new(1.0 / n as f64, 0.0));
    let mut prev = Complex64::new(f64::NAN, 0.0);
    let mut gap = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let mv = a * &v;
        let norm = l1c(&mv);
        if norm == 0.0 {
            let f = GridFunction::generic(m.grid().clone(), v.as_slice().to_vec())?;
            return Ok(SpectralResult { eigenvalue: Complex64::new(0.0, 0.0), eigenfunction: f, residual: 0.0, iterations: it });
        }
        let iota = mv.sum() / v.sum();
        v = mv.unscale(norm);
        gap = (iota - prev).norm();
        prev = iota;
        let residual = l1c(&(a * &v - &v * iota));
        if gap < opts.tolerance && residual < opts.residual_tolerance.max(10.0 * opts.tolerance) {
            let f = GridFunction::generic(m.grid().clone(), v.as_slice().to_vec())?;
            return Ok(SpectralResult { eigenvalue: iota, eigenfunction: f, residual, iterations: it });
        }
    }
    Err(Error::NoConvergence { iterations: opts.max_iter, gap })
}

/// Largest-modulus eigenvalue of a real matrix by a dense Schur decomposition.
pub fn dense_leading_eigenvalue(m: &DMatrix<f64>) -> Complex64 {
    m.complex_eigenvalues()
        .iter()
        .copied()
        .max_by(|a, b| a.norm().total_cmp(&b.norm()))
        .unwrap_or_default()
}

/// Largest-modulus eigenvalue of a complex matrix.
pub fn dense_leading_eigenvalue_complex(m: &DMatrix<Complex64>) -> Option<Complex64> {
    m.clone()
        .schur()
        .eigenvalues()?
        .iter()
        .copied()
        .max_by(|a, b| a.norm().total_cmp(&b.norm()))
}

/// `∫ M_n^n f₀ ≈ λ_n^n ⟨u, f₀⟩ / ⟨u, f_n⟩` from the leading right/left
/// eigenpair, with `f_n` of unit mass.
pub fn spectral_survival(holed: &TransferMatrix, f0: &GridFunction, n_steps: usize, opts: &PowerOptions) -> Result<f64> {
    let right = leading_eigenvalue(holed, opts)?;
    let (_, u) = left_eigenvector(holed, opts)?;
    let vol = holed.grid().cell_volume();
    let fn_mass: f64 = right.eigenfunction.values().iter().sum::<f64>() * vol;
    if fn_mass == 0.0 {
        return Ok(0.0);
    }
    let pair = |f: &[f64]| u.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
    let ratio = pair(f0.values()) / (pair(right.eigenfunction.values()) / fn_mass);
    Ok(right.eigenvalue.re.powi(n_steps as i32) * ratio)
}
