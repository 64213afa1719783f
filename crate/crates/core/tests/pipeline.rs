//! End-to-end runs through the public API.

use sdevl::evt::{calibrate_threshold, evl_estimate, poisson_counts, poisson_gof, MeasureEstimator, ThresholdPlan};
use sdevl::kernel::{write_density_csv, KernelMode};
use sdevl::operator::{
    build_transfer_matrix, evl_via_operator, invariant_density, leading_eigenvalue, HoleSpec, PowerOptions, TransferMatrix,
};
use sdevl::sde::{DriftModel, SamplingPlan, Scheme};
use sdevl::spaces::GridSpec;

#[test]
fn operator_and_monte_carlo_agree_on_a_one_cell_hole() {
    let model = DriftModel::ou(1).unwrap();
    let grid = GridSpec::new(1, 6.0, 401).unwrap();
    let plain = build_transfer_matrix(&model, 0.5, &grid, KernelMode::ExactOu).unwrap();
    let f0 = invariant_density(&plain, &PowerOptions::default()).unwrap().eigenfunction;
    let r = 0.5 * grid.cell_width();
    let hole = HoleSpec::new(&grid, &[0.0], r).unwrap();
    let n = (1.0 / hole.mass(&f0)).round() as usize;
    let p_op = evl_via_operator(&plain.apply_hole(&hole).unwrap(), &f0, n).unwrap();

    let plan = ThresholdPlan::from_radius(&MeasureEstimator::Grid(f0), &[0.0], r, n).unwrap();
    let sampling = SamplingPlan::new(0.5, n).with_scheme(Scheme::ExactOu).with_trajectories(20_000).with_seed(4);
    let mc = evl_estimate(&model, &plan, &sampling).unwrap();
    assert!((mc.p_hat - p_op).abs() < 3.0 * mc.stderr + 0.02, "{} vs {p_op}", mc.p_hat);
}

#[test]
fn non_gaussian_model_runs_through_grid_calibration() {
    let model = DriftModel::double_well(1, 3.0).unwrap();
    let grid = GridSpec::new(1, 3.0, 150).unwrap();
    let plain = build_transfer_matrix(&model, 0.5, &grid, KernelMode::Composed { substeps: 10 }).unwrap();
    let f0 = invariant_density(&plain, &PowerOptions::default()).unwrap().eigenfunction;
    // bimodal: more mass near ±1 than at the origin
    let at = |x: f64| f0.values()[grid.cell_of(&[x]).unwrap()];
    assert!(at(1.0) > at(0.0) && at(-1.0) > at(0.0));

    let plan = calibrate_threshold(&MeasureEstimator::Grid(f0), &[1.0], 200, 1.0).unwrap();
    let sampling = SamplingPlan::new(0.5, 200).with_substeps(20).with_trajectories(2000).with_seed(9);
    let hist = poisson_counts(&model, &plan, &sampling).unwrap();
    assert_eq!(hist.counts.iter().sum::<u64>(), 2000);
    assert!((hist.mean() - 1.0).abs() < 4.0 * hist.mean_stderr() + 0.1, "{}", hist.mean());
    assert!(poisson_gof(&hist).unwrap().dof >= 1);
}

#[test]
fn matrices_and_densities_survive_a_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let grid = GridSpec::new(1, 5.0, 64).unwrap();
    let m = build_transfer_matrix(&DriftModel::ou(1).unwrap(), 1.0, &grid, KernelMode::ExactOu).unwrap();
    let bin = dir.path().join("m.bin");
    m.write_binary(&bin).unwrap();
    let back = TransferMatrix::read_binary(&bin).unwrap();
    assert_eq!(back.matrix(), m.matrix());
    assert_eq!(back.grid(), m.grid());
    let opts = PowerOptions::default();
    assert_eq!(
        leading_eigenvalue(&back, &opts).unwrap().eigenvalue,
        leading_eigenvalue(&m, &opts).unwrap().eigenvalue
    );

    let f0 = invariant_density(&m, &opts).unwrap().eigenfunction;
    let csv = dir.path().join("f0.csv");
    write_density_csv(&csv, &f0).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "x1,value");
    let mass: f64 = lines.map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap()).sum::<f64>() * grid.cell_volume();
    assert!((mass - 1.0).abs() < 1e-9);
}

#[test]
fn calibration_drives_the_survival_law() {
    let model = DriftModel::ou(1).unwrap();
    let est = MeasureEstimator::ou_stationary(1);
    let n = 1000;
    let sampling = SamplingPlan::new(0.5, n).with_scheme(Scheme::ExactOu).with_trajectories(10_000).with_seed(21);
    for tau in [0.5, 2.0] {
        let plan = calibrate_threshold(&est, &[0.0], n, tau).unwrap();
        let e = evl_estimate(&model, &plan, &sampling).unwrap();
        assert!((e.p_hat - (-tau).exp()).abs() < 3.0 * e.stderr + 0.015, "tau {tau}: {}", e.p_hat);
    }
}
