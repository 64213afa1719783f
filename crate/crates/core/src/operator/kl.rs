use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::TransferMatrix;
use crate::error::{Error, Result};
use crate::spaces::GridFunction;

/// Keller-Liverani quantities of a hole perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub radius: f64,
    /// `C_h · Leb(B)` with `C_h` the largest kernel density value.
    pub pi_n: f64,
    /// `∫ (M - M_n) f₀`
    pub delta_n: f64,
    /// `μ(B)` summed from `f₀` over hole cells.
    pub mu_hole: f64,
    pub leb_hole: f64,
    /// `q_{k,n}` for `k = 0..=k_max`.
    pub q: Vec<f64>,
    pub q_sum: f64,
    /// `q_{k_max} / q_{k_max - 1}`, the observed geometric decay of the terms.
    pub tail_ratio: f64,
    /// `1 - Σ q_k`
    pub theta: f64,
    /// `1 - θ Δ_n`
    pub lambda_prediction: f64,
}

impl KlReport {
    pub fn max_q(&self) -> f64 {
        self.q.iter().copied().fold(0.0, f64::max)
    }
}

/// `D f₀ = (M - M_n) f₀` and `q_k = ⟨1, (M - M_n) M_n^k D f₀⟩ / μ(B)`.
pub fn kl_quantities(plain: &TransferMatrix, holed: &TransferMatrix, f0: &GridFunction, k_max: usize) -> Result<KlReport> {
    if plain.hole().is_some() {
        return Err(Error::InvalidArgument("first matrix must be plain".into()));
    }
    let Some(hole) = holed.hole() else {
        return Err(Error::InvalidArgument("second matrix must carry a hole".into()));
    };
    if plain.grid() != holed.grid() || f0.grid() != plain.grid() {
        return Err(Error::InvalidArgument("matrices and density live on different grids".into()));
    }
    let grid = plain.grid();
    let vol = grid.cell_volume();
    let mu_hole = hole.mass(f0);
    if !(mu_hole > 0.0) {
        return Err(Error::InvalidArgument(format!("hole of radius {} has zero mass", hole.radius())));
    }

    // (M - M_n) g keeps only the hole rows of M g
    let cut = |g: &DVector<f64>| -> DVector<f64> {
        let full = plain.matrix() * g;
        let mut out = DVector::zeros(g.len());
        for &j in hole.cells() {
            out[j] = full[j];
        }
        out
    };

    let mut w = cut(&DVector::from_column_slice(f0.values()));
    let delta_n = w.sum() * vol;
    let mut q = Vec::with_capacity(k_max + 1);
    for _ in 0..=k_max {
        q.push(cut(&w).sum() * vol / mu_hole);
        w = holed.matrix() * w;
    }
    let q_sum: f64 = q.iter().sum();
    let tail_ratio = if k_max >= 1 && q[k_max - 1] > 0.0 { q[k_max] / q[k_max - 1] } else { f64::NAN };
    let theta = 1.0 - q_sum;
    let leb_hole = hole.lebesgue(grid);
    Ok(KlReport {
        radius: hole.radius(),
        pi_n: plain.kernel_sup() * leb_hole,
        delta_n,
        mu_hole,
        leb_hole,
        q,
        q_sum,
        tail_ratio,
        theta,
        lambda_prediction: 1.0 - theta * delta_n,
    })
}

/// `∫ M_n^n f₀`: the mass surviving `n_steps` applications of the holed matrix.
pub fn evl_via_operator(holed: &TransferMatrix, f0: &GridFunction, n_steps: usize) -> Result<f64> {
    if f0.grid() != holed.grid() {
        return Err(Error::InvalidArgument("density lives on a different grid".into()));
    }
    let mut v = DVector::from_column_slice(f0.values());
    for _ in 0..n_steps {
        v = holed.matrix() * v;
    }
    Ok(v.sum() * holed.grid().cell_volume())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelMode;
    use crate::operator::{build_transfer_matrix, invariant_density, spectral_survival, HoleSpec, PowerOptions};
    use crate::sde::DriftModel;
    use crate::spaces::GridSpec;

    fn setup(m: usize) -> (TransferMatrix, GridFunction) {
        let grid = GridSpec::new(1, 6.0, m).unwrap();
        let plain = build_transfer_matrix(&DriftModel::ou(1).unwrap(), 0.5, &grid, KernelMode::ExactOu).unwrap();
        let f0 = invariant_density(&plain, &PowerOptions::default()).unwrap().eigenfunction;
        (plain, f0)
    }

    #[test]
    fn q_terms_are_probabilities_and_shrink_with_the_hole() {
        let (plain, f0) = setup(512);
        let mut reports = Vec::new();
        for r in [0.1, 0.05, 0.025] {
            let hole = HoleSpec::new(plain.grid(), &[0.0], r).unwrap();
            let rep = kl_quantities(&plain, &plain.apply_hole(&hole).unwrap(), &f0, 20).unwrap();
            assert!(rep.q.iter().all(|q| *q >= 0.0));
            assert!(rep.q_sum <= 1.0 + 1e-12);
            assert!((rep.delta_n - rep.mu_hole).abs() < 1e-8);
            // oracle bound: q_k <= Leb(B) · C_h · Leb(B) / μ(B)
            let bound = rep.leb_hole * rep.pi_n / rep.mu_hole;
            assert!(rep.q.iter().all(|q| *q <= bound + 1e-12), "{:?} vs {bound}", rep.q);
            reports.push(rep);
        }
        assert!(reports[0].q_sum > reports[1].q_sum && reports[1].q_sum > reports[2].q_sum);
        let maxq: Vec<f64> = reports.iter().map(|r| r.max_q()).collect();
        assert!(maxq[0] > maxq[1] && maxq[1] > maxq[2], "{maxq:?}");
        // linear decay in Leb(B): halving the hole roughly halves max q
        for w in reports.windows(2) {
            let ratio = w[1].max_q() / w[0].max_q();
            let leb_ratio = w[1].leb_hole / w[0].leb_hole;
            assert!((ratio / leb_ratio - 1.0).abs() < 0.25, "{ratio} vs {leb_ratio}");
        }
    }

    #[test]
    fn zero_mass_hole_is_an_error() {
        let (plain, f0) = setup(64);
        let hole = HoleSpec::new(plain.grid(), &[0.01], 1e-4).unwrap();
        assert!(kl_quantities(&plain, &plain.apply_hole(&hole).unwrap(), &f0, 5).is_err());
    }

    #[test]
    fn survival_examples() {
        let (plain, f0) = setup(256);
        assert!((evl_via_operator(&plain, &f0, 0).unwrap() - 1.0).abs() < 1e-12);
        for n in [1, 10, 100] {
            assert!((evl_via_operator(&plain, &f0, n).unwrap() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn survival_matches_spectral_decomposition() {
        // odd grid so a single cell sits on x₀ = 0
        let grid = GridSpec::new(1, 6.0, 1355).unwrap();
        let plain = build_transfer_matrix(&DriftModel::ou(1).unwrap(), 0.5, &grid, KernelMode::ExactOu).unwrap();
        let f0 = invariant_density(&plain, &PowerOptions::default()).unwrap().eigenfunction;
        let hole = HoleSpec::new(&grid, &[0.0], 0.5 * grid.cell_width()).unwrap();
        assert_eq!(hole.cells().len(), 1);
        let n = (1.0 / hole.mass(&f0)).round() as usize;
        assert_eq!(n, 200);
        let held = plain.apply_hole(&hole).unwrap();
        let p = evl_via_operator(&held, &f0, n).unwrap();
        let oracle = spectral_survival(&held, &f0, n, &PowerOptions::default()).unwrap();
        assert!((p - oracle).abs() < 1e-3, "{p} vs {oracle}");
        assert!((0.33..=0.41).contains(&p), "{p}");
    }
}
