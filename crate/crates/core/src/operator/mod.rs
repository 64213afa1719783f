//! Discretized transfer operators.
//!
//! `M[j, i] = vol · S_h(x_i, x_j)` maps a vector of cell densities (source
//! cell `i`) to the density after one sampling step (target cell `j`). A hole
//! zeroes the rows of target cells inside the ball; a twist multiplies them
//! by `e^{is}`.

mod kl;
mod lasota_yorke;
mod spectral;

pub use kl::{evl_via_operator, kl_quantities, KlReport};
pub use lasota_yorke::{
    default_test_set, gradient_smoothing_ratios, lasota_yorke_fit, twisted_eigenvalue_expansion, LyFit, LyOptions,
    TwistRow,
};
pub use spectral::{
    dense_leading_eigenvalue, dense_leading_eigenvalue_complex, invariant_density, leading_eigenvalue,
    leading_eigenvalue_twisted, left_eigenvector, spectral_survival, PowerOptions, SpectralResult,
};

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{column_loss, KernelMode, TransitionKernel, MAX_TRUNCATION_LOSS};
use crate::sde::{DriftModel, State};
use crate::spaces::{GridFunction, GridSpec};

/// The ball `B(x₀, r)` and the grid cells whose centre lies in it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoleSpec {
    center: State,
    radius: f64,
    cells: Vec<usize>,
}

impl HoleSpec {
    pub fn new(grid: &GridSpec, center: &[f64], radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidArgument(format!("hole radius must be positive, got {radius}")));
        }
        if !grid.contains(center) {
            return Err(Error::HoleOutsideBox { center: center.to_vec(), half_width: grid.half_width() });
        }
        Ok(Self { center: center.to_vec(), radius, cells: grid.cells_in_ball(center, radius) })
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// `u_n = -ln r`
    pub fn level(&self) -> f64 {
        -self.radius.ln()
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Lebesgue measure of the grid hole.
    pub fn lebesgue(&self, grid: &GridSpec) -> f64 {
        self.cells.len() as f64 * grid.cell_volume()
    }

    /// `μ(B)` for the density `f`, summed over hole cells.
    pub fn mass(&self, f: &GridFunction) -> f64 {
        self.cells.iter().map(|&i| f.values()[i]).sum::<f64>() * f.grid().cell_volume()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Plain,
    Holed(HoleSpec),
}

/// Real transfer matrix, plain or holed.
#[derive(Debug, Clone)]
pub struct TransferMatrix {
    grid: GridSpec,
    h: f64,
    matrix: DMatrix<f64>,
    variant: Variant,
    truncation_loss: f64,
}

/// Collocates `S_h` on the grid. Fails if any source column loses more than
/// 1% of its mass through the boundary.
pub fn build_transfer_matrix(model: &DriftModel, h: f64, grid: &GridSpec, mode: KernelMode) -> Result<TransferMatrix> {
    if model.dim() != grid.dim() {
        return Err(Error::InvalidArgument("model and grid dimensions differ".into()));
    }
    let kernel = TransitionKernel::new(model, h, mode, grid)?;
    let matrix = kernel.grid_matrix(grid)?;
    let loss = column_loss(&matrix);
    if loss > MAX_TRUNCATION_LOSS {
        return Err(Error::Truncation { loss, limit: MAX_TRUNCATION_LOSS });
    }
    Ok(TransferMatrix { grid: grid.clone(), h, matrix, variant: Variant::Plain, truncation_loss: loss })
}

impl TransferMatrix {
    /// Wraps a precomputed plain matrix.
    pub fn from_matrix(grid: &GridSpec, h: f64, matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != grid.len() || matrix.ncols() != grid.len() {
            return Err(Error::InvalidArgument("matrix shape does not match the grid".into()));
        }
        let loss = column_loss(&matrix);
        Ok(Self { grid: grid.clone(), h, matrix, variant: Variant::Plain, truncation_loss: loss })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn variant(&self) -> &Variant {
        &self.variant
    }

    pub fn hole(&self) -> Option<&HoleSpec> {
        match &self.variant {
            Variant::Plain => None,
            Variant::Holed(h) => Some(h),
        }
    }

    pub fn truncation_loss(&self) -> f64 {
        self.truncation_loss
    }

    /// Largest kernel density value `max S_h(x_i, x_j)`.
    pub fn kernel_sup(&self) -> f64 {
        self.matrix.max() / self.grid.cell_volume()
    }

    /// `1_{B^c} · (M f)`: zeroes target rows inside the hole.
    pub fn apply_hole(&self, hole: &HoleSpec) -> Result<Self> {
        if !self.grid.contains(hole.center()) {
            return Err(Error::HoleOutsideBox { center: hole.center().to_vec(), half_width: self.grid.half_width() });
        }
        if self.hole().is_some() {
            return Err(Error::InvalidArgument("matrix already carries a hole".into()));
        }
        let mut matrix = self.matrix.clone();
        for &j in hole.cells() {
            matrix.row_mut(j).fill(0.0);
        }
        Ok(Self {
            grid: self.grid.clone(),
            h: self.h,
            matrix,
            variant: Variant::Holed(hole.clone()),
            truncation_loss: self.truncation_loss,
        })
    }

    /// `e^{i s 1_B} · (M f)` on a plain matrix.
    pub fn twist(&self, hole: &HoleSpec, s: f64) -> Result<TwistedMatrix> {
        if self.hole().is_some() {
            return Err(Error::InvalidArgument("twist needs the plain matrix".into()));
        }
        if !self.grid.contains(hole.center()) {
            return Err(Error::HoleOutsideBox { center: hole.center().to_vec(), half_width: self.grid.half_width() });
        }
        let mut matrix = self.matrix.map(|v| Complex64::new(v, 0.0));
        let phase = Complex64::from_polar(1.0, s);
        for &j in hole.cells() {
            matrix.row_mut(j).iter_mut().for_each(|v| *v *= phase);
        }
        Ok(TwistedMatrix { grid: self.grid.clone(), h: self.h, hole: hole.clone(), s, matrix })
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(f);
        (&self.matrix * v).as_slice().to_vec()
    }

    /// Dual action `Mᵀ φ` on observables.
    pub fn apply_transpose(&self, phi: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(phi);
        self.matrix.tr_mul(&v).as_slice().to_vec()
    }

    pub fn apply_fn(&self, f: &GridFunction) -> Result<GridFunction> {
        if f.grid() != &self.grid {
            return Err(Error::InvalidArgument("function lives on a different grid".into()));
        }
        GridFunction::generic(self.grid.clone(), self.apply(f.values()))
    }

    /// Row-major little-endian dump: `d: u32, m: u32, L: f64, h: f64`, then
    /// `(m^d)²` entries `M[j, i]` with the target index `j` outermost.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(&(self.grid.dim() as u32).to_le_bytes())?;
        out.write_all(&(self.grid.cells_per_axis() as u32).to_le_bytes())?;
        out.write_all(&self.grid.half_width().to_le_bytes())?;
        out.write_all(&self.h.to_le_bytes())?;
        for row in self.matrix.row_iter() {
            for v in row.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a plain matrix written by [`TransferMatrix::write_binary`].
    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = || Error::InvalidArgument("malformed transfer matrix file".into());
        if bytes.len() < 24 {
            return Err(bad());
        }
        let d = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let m = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let l = f64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let h = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let grid = GridSpec::new(d, l, m)?;
        let n = grid.len();
        if bytes.len() != 24 + 8 * n * n {
            return Err(bad());
        }
        let entries = bytes[24..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let matrix = DMatrix::from_row_iterator(n, n, entries);
        Self::from_matrix(&grid, h, matrix)
    }
}

/// Complex matrix of the twisted operator.
#[derive(Debug, Clone)]
pub struct TwistedMatrix {
    grid: GridSpec,
    h: f64,
    hole: HoleSpec,
    s: f64,
    matrix: DMatrix<Complex64>,
}

impl TwistedMatrix {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn hole(&self) -> &HoleSpec {
        &self.hole
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.matrix
    }
}

/// JSON record of one spectral computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralRecord {
    pub h: f64,
    pub grid: GridSpec,
    pub hole: Option<HoleSpec>,
    /// `[re, im]`
    pub lambda: [f64; 2],
    pub residual: f64,
    pub theta: Option<f64>,
    pub q: Vec<f64>,
}

impl SpectralRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("spectral record serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn ou_matrix(m: usize) -> TransferMatrix {
        let grid = GridSpec::new(1, 6.0, m).unwrap();
        build_transfer_matrix(&DriftModel::ou(1).unwrap(), 0.5, &grid, KernelMode::ExactOu).unwrap()
    }

    fn stationary(grid: &GridSpec) -> GridFunction {
        let vals = (0..grid.len())
            .map(|i| {
                let x = grid.center(i);
                (-x.iter().map(|v| v * v).sum::<f64>()).exp()
            })
            .collect();
        GridFunction::normalized_density(grid.clone(), vals).unwrap()
    }

    #[test]
    fn ou_columns_are_stochastic() {
        let m = ou_matrix(512);
        for c in m.matrix().column_iter() {
            let s = c.sum();
            assert!((0.99..=1.0 + 1e-12).contains(&s), "{s}");
        }
        assert!(m.matrix().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn ou_stationary_density_is_fixed() {
        let m = ou_matrix(512);
        let f = stationary(m.grid());
        let mf = m.apply_fn(&f).unwrap();
        let err = mf.sum(&f.scaled(-1.0)).unwrap().l1_norm();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn zero_drift_kernel_is_symmetric() {
        let zero = DriftModel::custom("zero", 1, |_, o| o.fill(0.0), 0.0, 1.0, 1.0).unwrap();
        let grid = GridSpec::new(1, 2.0, 100).unwrap();
        let k = TransitionKernel::composed(&zero, 0.01, 1, &grid).unwrap();
        let m = k.grid_matrix(&grid).unwrap();
        assert_abs_diff_eq!((&m - m.transpose()).amax(), 0.0, epsilon = 1e-12);
        // banded: eight standard deviations off the diagonal the weight is gone
        assert!(m[(50, 70)] < 1e-12 * m[(50, 50)]);
    }

    #[test]
    fn hole_zeroes_target_rows() {
        let m = ou_matrix(128);
        let hole = HoleSpec::new(m.grid(), &[0.0], 0.2).unwrap();
        assert!(!hole.is_empty());
        let held = m.apply_hole(&hole).unwrap();
        for j in 0..m.grid().len() {
            if hole.cells().contains(&j) {
                assert!(held.matrix().row(j).iter().all(|v| *v == 0.0));
            } else {
                assert_eq!(held.matrix().row(j), m.matrix().row(j));
            }
        }
    }

    #[test]
    fn degenerate_holes() {
        let m = ou_matrix(64);
        let grid = m.grid().clone();
        // radius smaller than the gap to the nearest centre
        let none = HoleSpec::new(&grid, &[0.01], 1e-4).unwrap();
        assert!(none.is_empty());
        assert_eq!(m.apply_hole(&none).unwrap().matrix(), m.matrix());

        let all = HoleSpec::new(&grid, &[0.0], 100.0).unwrap();
        assert_eq!(m.apply_hole(&all).unwrap().matrix().amax(), 0.0);

        assert!(matches!(HoleSpec::new(&grid, &[7.0], 0.1), Err(Error::HoleOutsideBox { .. })));
    }

    #[test]
    fn mass_deficit_equals_hole_mass() {
        let m = ou_matrix(256);
        let f0 = invariant_density(&m, &PowerOptions::default()).unwrap().eigenfunction;
        let hole = HoleSpec::new(m.grid(), &[0.3], 0.1).unwrap();
        let held = m.apply_hole(&hole).unwrap();
        let after = GridFunction::generic(m.grid().clone(), held.apply(f0.values())).unwrap();
        let deficit = 1.0 - after.mass();
        // f0 is a fixed point, so the removed mass is exactly the hole mass of f0
        assert_abs_diff_eq!(deficit, hole.mass(&f0), epsilon = 1e-8);
    }

    #[test]
    fn truncation_is_rejected() {
        let grid = GridSpec::new(1, 0.5, 32).unwrap();
        let err = build_transfer_matrix(&DriftModel::ou(1).unwrap(), 0.5, &grid, KernelMode::ExactOu).unwrap_err();
        assert!(matches!(err, Error::Truncation { .. }));
    }

    #[test]
    fn binary_round_trip() {
        let m = ou_matrix(32);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        m.write_binary(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 24 + 8 * 32 * 32);
        // second entry of the file is M[0, 1]
        assert_eq!(f64::from_le_bytes(bytes[32..40].try_into().unwrap()), m.matrix()[(0, 1)]);
        let back = TransferMatrix::read_binary(&path).unwrap();
        assert_eq!(back.matrix(), m.matrix());
        assert_eq!(back.grid(), m.grid());
        assert_eq!(back.h(), 0.5);
    }

    #[test]
    fn spectral_record_json_shape() {
        let m = ou_matrix(16);
        let rec = SpectralRecord {
            h: 0.5,
            grid: m.grid().clone(),
            hole: None,
            lambda: [1.0, 0.0],
            residual: 0.0,
            theta: None,
            q: vec![],
        };
        let v: serde_json::Value = serde_json::from_str(&rec.to_json()).unwrap();
        for key in ["h", "grid", "hole", "lambda", "residual", "theta", "q"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn duality_transpose_identity(
            phi in prop::collection::vec(-1.0..1.0f64, 48),
            f in prop::collection::vec(0.0..2.0f64, 48),
            center in -2.0..2.0f64,
            r in 0.05..1.0f64,
        ) {
            let grid = GridSpec::new(1, 4.0, 48).unwrap();
            let m = build_transfer_matrix(&DriftModel::ou(1).unwrap(), 0.5, &grid, KernelMode::ExactOu).unwrap();
            let held = m.apply_hole(&HoleSpec::new(&grid, &[center], r).unwrap()).unwrap();
            let lhs: f64 = phi.iter().zip(held.apply(&f)).map(|(a, b)| a * b).sum();
            let rhs: f64 = held.apply_transpose(&phi).iter().zip(&f).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }
    }
}
