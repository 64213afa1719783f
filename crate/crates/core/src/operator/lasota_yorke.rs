use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{leading_eigenvalue_twisted, HoleSpec, PowerOptions, TransferMatrix};
use crate::error::{Error, Result};
use crate::spaces::{fd_gradient_sup, weighted_l1_norm, GridFunction, GridSpec, SpacesContext};

type Shape = Box<dyn Fn(&[f64]) -> f64>;

/// Densities with jumps, narrow support, oscillation and smooth tails.
pub fn default_test_set(grid: &GridSpec) -> Vec<GridFunction> {
    let sq = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
    let shapes: Vec<Shape> = vec![
        Box::new(|x| if x.iter().all(|v| v.abs() <= 1.0) { 1.0 } else { 0.0 }),
        Box::new(|x| if x.iter().all(|v| (0.5..=2.0).contains(v)) { 1.0 } else { 0.0 }),
        Box::new(move |x| if sq(&x.iter().map(|v| v + 1.0).collect::<Vec<_>>()) < 0.04 { 1.0 } else { 0.0 }),
        Box::new(move |x| (-sq(&x.iter().map(|v| v - 1.0).collect::<Vec<_>>()) / 0.18).exp()),
        Box::new(move |x| (1.0 + 0.9 * (6.0 * x[0]).sin()) * (-0.5 * sq(x)).exp()),
        Box::new(move |x| (-sq(x)).exp()),
    ];
    shapes
        .iter()
        .filter_map(|f| {
            let vals = (0..grid.len()).map(|i| f(&grid.center(i))).collect();
            GridFunction::normalized_density(grid.clone(), vals).ok()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyOptions {
    pub n_max: usize,
    /// Candidate contraction rates, all in `(0, 1)`.
    pub lambdas: Vec<f64>,
    /// A fit only counts if `A <= a_cap` and `B <= b_cap`.
    pub a_cap: f64,
    pub b_cap: f64,
}

impl Default for LyOptions {
    fn default() -> Self {
        Self { n_max: 8, lambdas: (1..20).map(|k| k as f64 * 0.05).collect(), a_cap: 100.0, b_cap: 100.0 }
    }
}

/// Fitted `‖M^n f‖_BV <= A λ^n ‖f‖_BV + B ‖f‖_{L¹}` over a test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyFit {
    pub a: f64,
    pub lambda: f64,
    pub b: f64,
    pub pass: bool,
    /// `‖M f‖_BV / ‖f‖_{L¹_α}` per test function.
    pub smoothing: Vec<f64>,
    /// `‖M^n f‖_BV` for `n = 0..=n_max`, per test function.
    pub norms: Vec<Vec<f64>>,
}

/// Minimizes `A + B` subject to `a_i A + b_i B >= c_i`, `A, B >= 0`. The
/// optimum of this two-variable LP sits on a vertex of the feasible set.
fn fit_two_constants(rows: &[(f64, f64, f64)]) -> Option<(f64, f64)> {
    let active: Vec<_> = rows.iter().copied().filter(|r| r.2 > 0.0).collect();
    if active.is_empty() {
        return Some((0.0, 0.0));
    }
    let feasible = |a: f64, b: f64| {
        a >= 0.0 && b >= 0.0 && active.iter().all(|&(p, q, c)| p * a + q * b >= c * (1.0 - 1e-12))
    };
    let mut candidates = Vec::new();
    for (i, &(p, q, c)) in active.iter().enumerate() {
        if p > 0.0 {
            candidates.push((c / p, 0.0));
        }
        if q > 0.0 {
            candidates.push((0.0, c / q));
        }
        for &(p2, q2, c2) in &active[i + 1..] {
            let det = p * q2 - q * p2;
            if det.abs() > 1e-300 {
                candidates.push(((c * q2 - q * c2) / det, (p * c2 - c * p2) / det));
            }
        }
    }
    candidates
        .into_iter()
        .filter(|&(a, b)| feasible(a, b))
        .min_by(|x, y| (x.0 + x.1).total_cmp(&(y.0 + y.1)))
}

/// Computes `‖M^n f‖_BV` along the test set and fits `(A, λ, B)` on a
/// ladder of rates, keeping the rate with the smallest `A + B`.
pub fn lasota_yorke_fit(m: &TransferMatrix, test_set: &[GridFunction], ctx: &SpacesContext, opts: &LyOptions) -> Result<LyFit> {
    if test_set.is_empty() {
        return Err(Error::InvalidArgument("empty Lasota-Yorke test set".into()));
    }
    if opts.n_max < 2 {
        return Err(Error::InvalidArgument("n_max must be >= 2".into()));
    }
    if opts.lambdas.iter().any(|l| !(*l > 0.0 && *l < 1.0)) || opts.lambdas.is_empty() {
        return Err(Error::InvalidArgument("candidate rates must lie in (0, 1)".into()));
    }
    let mut norms = Vec::with_capacity(test_set.len());
    let mut smoothing = Vec::with_capacity(test_set.len());
    let mut l1 = Vec::with_capacity(test_set.len());
    for f in test_set {
        let mut g = f.clone();
        let mut row = vec![ctx.bv_norm(&g)?];
        for n in 1..=opts.n_max {
            g = m.apply_fn(&g)?;
            let bv = ctx.bv_norm(&g)?;
            if n == 1 {
                smoothing.push(bv / weighted_l1_norm(f, ctx.alpha)?);
            }
            row.push(bv);
        }
        norms.push(row);
        l1.push(f.l1_norm());
    }

    let mut best: Option<(f64, f64, f64)> = None;
    for &lambda in &opts.lambdas {
        let rows: Vec<(f64, f64, f64)> = norms
            .iter()
            .zip(&l1)
            .flat_map(|(row, &w)| (1..=opts.n_max).map(move |n| (lambda.powi(n as i32) * row[0], w, row[n])))
            .collect();
        if let Some((a, b)) = fit_two_constants(&rows) {
            if best.is_none_or(|(ba, _, bb)| a + b < ba + bb) {
                best = Some((a, lambda, b));
            }
        }
    }
    let (a, lambda, b) = best.ok_or_else(|| Error::InsufficientData("no feasible Lasota-Yorke fit".into()))?;
    Ok(LyFit { a, lambda, b, pass: lambda < 1.0 && a <= opts.a_cap && b <= opts.b_cap, smoothing, norms })
}

/// `sup |∇(M f)| / ‖f‖_{L¹}` per test function, by forward differences.
pub fn gradient_smoothing_ratios(m: &TransferMatrix, test_set: &[GridFunction]) -> Result<Vec<f64>> {
    test_set
        .iter()
        .map(|f| Ok(fd_gradient_sup(&m.apply_fn(f)?) / f.l1_norm()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwistRow {
    pub s: f64,
    /// `[re, im]` of the leading eigenvalue `ι_n`.
    pub iota: [f64; 2],
    /// `1 - (1 - e^{is}) μ(B)` as `[re, im]`.
    pub predicted: [f64; 2],
    pub error: f64,
    pub mu_hole: f64,
    pub residual: f64,
}

/// Leading eigenvalue of each twisted matrix against `1 - (1 - e^{is}) μ(B)`.
pub fn twisted_eigenvalue_expansion(
    plain: &TransferMatrix,
    hole: &HoleSpec,
    s_list: &[f64],
    f0: &GridFunction,
    opts: &PowerOptions,
) -> Result<Vec<TwistRow>> {
    let mu = hole.mass(f0);
    s_list
        .iter()
        .map(|&s| {
            if !(s > 0.0 && s < 2.0 * std::f64::consts::PI) {
                return Err(Error::InvalidArgument(format!("twist parameter {s} is outside (0, 2π)")));
            }
            let res = leading_eigenvalue_twisted(&plain.twist(hole, s)?, opts)?;
            let pred = Complex64::new(1.0, 0.0) - (Complex64::new(1.0, 0.0) - Complex64::from_polar(1.0, s)) * mu;
            Ok(TwistRow {
                s,
                iota: [res.eigenvalue.re, res.eigenvalue.im],
                predicted: [pred.re, pred.im],
                error: (res.eigenvalue - pred).norm(),
                mu_hole: mu,
                residual: res.residual,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelMode;
    use crate::operator::{build_transfer_matrix, invariant_density};
    use crate::sde::DriftModel;
    use std::f64::consts::PI;

    fn plain(m: usize) -> TransferMatrix {
        let grid = GridSpec::new(1, 6.0, m).unwrap();
        build_transfer_matrix(&DriftModel::ou(1).unwrap(), 0.5, &grid, KernelMode::ExactOu).unwrap()
    }

    #[test]
    fn lp_vertex_solver() {
        // A + B >= 2 and A >= 0.5: optimum A + B = 2
        let (a, b) = fit_two_constants(&[(1.0, 1.0, 2.0), (1.0, 0.0, 0.5)]).unwrap();
        assert!((a + b - 2.0).abs() < 1e-12 && a >= 0.5 - 1e-12);
        // 2A + B >= 4, A + 3B >= 3: vertex at (1.8, 0.4)
        let (a, b) = fit_two_constants(&[(2.0, 1.0, 4.0), (1.0, 3.0, 3.0)]).unwrap();
        assert!((a - 1.8).abs() < 1e-12 && (b - 0.4).abs() < 1e-12);
        assert_eq!(fit_two_constants(&[(1.0, 1.0, -1.0)]), Some((0.0, 0.0)));
    }

    #[test]
    fn fits_exist_for_plain_and_holed_operators() {
        let m = plain(256);
        let ctx = SpacesContext::standard(m.grid());
        let set = default_test_set(m.grid());
        assert_eq!(set.len(), 6);
        let fit = lasota_yorke_fit(&m, &set, &ctx, &LyOptions::default()).unwrap();
        assert!(fit.pass, "{fit:?}");
        for r in [0.1, 0.05] {
            let hole = HoleSpec::new(m.grid(), &[0.0], r).unwrap();
            let f = lasota_yorke_fit(&m.apply_hole(&hole).unwrap(), &set, &ctx, &LyOptions::default()).unwrap();
            assert!(f.pass && f.lambda < 1.0, "r = {r}: {f:?}");
        }
    }

    #[test]
    fn fixed_point_orbit_is_bounded() {
        let m = plain(256);
        let ctx = SpacesContext::standard(m.grid());
        let f0 = invariant_density(&m, &PowerOptions::default()).unwrap().eigenfunction;
        let fit = lasota_yorke_fit(&m, &[f0], &ctx, &LyOptions::default()).unwrap();
        let row = &fit.norms[0];
        assert!(row.iter().all(|v| (v - row[0]).abs() < 1e-6 * row[0]));
        assert!(fit.pass);
    }

    #[test]
    fn one_step_smooths_narrowing_indicators() {
        let m = plain(512);
        let ctx = SpacesContext::standard(m.grid());
        let set: Vec<GridFunction> = [0.4, 0.1, 0.025]
            .iter()
            .map(|&w| {
                let vals = (0..m.grid().len()).map(|i| if m.grid().center(i)[0].abs() < w { 1.0 } else { 0.0 }).collect();
                GridFunction::normalized_density(m.grid().clone(), vals).unwrap()
            })
            .collect();
        let before: Vec<f64> = set
            .iter()
            .map(|f| ctx.bv_norm(f).unwrap() / weighted_l1_norm(f, 2.0).unwrap())
            .collect();
        let fit = lasota_yorke_fit(&m, &set, &ctx, &LyOptions::default()).unwrap();
        // the input ratio blows up as the support shrinks, the output ratio does not
        assert!(before[2] > 4.0 * before[0], "{before:?}");
        let spread = fit.smoothing.iter().copied().fold(0.0, f64::max) / fit.smoothing.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(spread < 1.1, "{:?}", fit.smoothing);
        assert!(fit.smoothing[2] < before[2] / 4.0);
    }

    #[test]
    fn gradient_smoothing_is_uniform() {
        let m = plain(512);
        let set = default_test_set(m.grid());
        let ratios = gradient_smoothing_ratios(&m, &set).unwrap();
        // sup over y of |∂_y S_h(x, y)|, the uniform constant for unit-mass inputs
        let var = crate::sde::ou_step_variance(0.5);
        let c = 1.0 / ((2.0 * PI).sqrt() * var) * (-0.5f64).exp();
        assert!(ratios.iter().all(|r| *r <= c * 1.01), "{ratios:?} vs {c}");
    }

    #[test]
    fn twisted_expansion_examples() {
        let m = plain(512);
        let f0 = invariant_density(&m, &PowerOptions::default()).unwrap().eigenfunction;
        let hole = HoleSpec::new(m.grid(), &[0.0], 0.05).unwrap();
        let rows = twisted_eigenvalue_expansion(&m, &hole, &[1e-4, PI / 2.0, PI], &f0, &PowerOptions::default()).unwrap();
        assert!((Complex64::new(rows[0].iota[0], rows[0].iota[1]) - 1.0).norm() < 1e-5);
        assert!(rows[2].error <= 0.5 * rows[2].mu_hole, "{:?}", rows[2]);
        for r in &rows {
            assert!(Complex64::new(r.iota[0], r.iota[1]).norm() <= 1.0 + 1e-12);
        }
        let dense = crate::operator::dense_leading_eigenvalue_complex(m.twist(&hole, PI).unwrap().matrix()).unwrap();
        assert!((Complex64::new(rows[2].iota[0], rows[2].iota[1]) - dense).norm() < 1e-8);
        assert!(twisted_eigenvalue_expansion(&m, &hole, &[0.0], &f0, &PowerOptions::default()).is_err());
    }
}
