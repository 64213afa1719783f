//! Dispatch from a validated configuration to the library, and result files.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use sdevl::evt::{
    block_sequence_experiment, calibrate_threshold, evl_estimate, poisson_counts, poisson_gof, time_refinement_experiment,
    to_csv, CsvRecord, MeasureEstimator, NoiseSpec, ThresholdPlan,
};
use sdevl::kernel::{default_substeps, KernelMode};
use sdevl::operator::{
    build_transfer_matrix, default_test_set, evl_via_operator, invariant_density, kl_quantities, lasota_yorke_fit,
    leading_eigenvalue, twisted_eigenvalue_expansion, HoleSpec, LyOptions, PowerOptions, SpectralRecord, TransferMatrix,
};
use sdevl::rng::derive_seed;
use sdevl::sde::{DriftModel, SamplingPlan};
use sdevl::spaces::{bv_norm, oscillation_seminorm, sup_bound_check, weighted_l1_norm, CompactBox, SpacesContext};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{Calibration, ExperimentConfig, Kind};

/// Tag written into every result.
pub const VERSION: &str = concat!("sdevl-cli ", env!("CARGO_PKG_VERSION"));

/// How a check compares its value with its target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// `|value - target| <= tolerance`
    Within,
    /// `value <= target + tolerance`
    AtMost,
    /// `value >= target - tolerance`
    AtLeast,
    /// `value < target`
    Below,
    /// `value > target`
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub target: f64,
    pub tolerance: f64,
    pub relation: Relation,
    pub pass: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, value: f64, target: f64, tolerance: f64, relation: Relation) -> Self {
        let mut c = Self { name: name.into(), value, target, tolerance, relation, pass: false };
        c.pass = c.evaluate();
        c
    }

    pub fn within(name: impl Into<String>, value: f64, target: f64, tolerance: f64) -> Self {
        Self::new(name, value, target, tolerance, Relation::Within)
    }

    pub fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self::new(name, value, bound, 0.0, Relation::AtMost)
    }

    pub fn at_least(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self::new(name, value, bound, 0.0, Relation::AtLeast)
    }

    pub fn below(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self::new(name, value, bound, 0.0, Relation::Below)
    }

    pub fn above(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self::new(name, value, bound, 0.0, Relation::Above)
    }

    /// Pass flag recomputed from value, target and tolerance.
    pub fn evaluate(&self) -> bool {
        let (v, t, tol) = (self.value, self.target, self.tolerance);
        match self.relation {
            Relation::Within => (v - t).abs() <= tol,
            Relation::AtMost => v <= t + tol,
            Relation::AtLeast => v >= t - tol,
            Relation::Below => v < t,
            Relation::Above => v > t,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub experiment_id: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub checks: Vec<Check>,
    /// Rows of the CSV file, for Monte Carlo kinds.
    pub records: Vec<CsvRecord>,
    /// Lines of the spectral JSON file, for operator kinds.
    pub spectral: Vec<SpectralRecord>,
    /// Kind-specific tables.
    pub details: Value,
    pub wall_time_s: f64,
}

impl ExperimentResult {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

#[derive(Default)]
struct Output {
    checks: Vec<Check>,
    records: Vec<CsvRecord>,
    spectral: Vec<SpectralRecord>,
    details: serde_json::Map<String, Value>,
}

/// Runs one experiment. Deterministic given the configuration.
pub fn run(config: &ExperimentConfig) -> anyhow::Result<ExperimentResult> {
    config.validate()?;
    let start = Instant::now();
    let id = &config.experiment_id;
    let out = dispatch(config).with_context(|| format!("experiment `{id}` ({})", config.kind))?;
    Ok(ExperimentResult {
        experiment_id: id.clone(),
        version: VERSION.to_string(),
        config: config.clone(),
        checks: out.checks,
        records: out.records,
        spectral: out.spectral,
        details: Value::Object(out.details),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

fn dispatch(config: &ExperimentConfig) -> anyhow::Result<Output> {
    let ctx = Setup::new(config)?;
    match config.kind {
        Kind::Evl => run_evl(&ctx),
        Kind::Poisson => run_poisson(&ctx),
        Kind::Spectrum => run_spectrum(&ctx),
        Kind::Kl => run_kl(&ctx),
        Kind::LyFit => run_ly_fit(&ctx),
        Kind::Refine => run_refine(&ctx),
        Kind::Blocks => run_blocks(&ctx),
        Kind::Norms => run_norms(&ctx),
        Kind::Unknown(ref k) => bail!("unknown kind `{k}`"),
    }
}

struct Setup<'a> {
    cfg: &'a ExperimentConfig,
    model: DriftModel,
    x0: Vec<f64>,
}

impl<'a> Setup<'a> {
    fn new(cfg: &'a ExperimentConfig) -> anyhow::Result<Self> {
        Ok(Self { cfg, model: cfg.build_model()?, x0: cfg.x0() })
    }

    fn id(&self) -> String {
        self.cfg.experiment_id.clone()
    }

    fn sampling(&self, h: f64, n: usize) -> SamplingPlan {
        let s = &self.cfg.sampling;
        SamplingPlan::new(h, n)
            .with_substeps(s.substeps)
            .with_trajectories(s.trials)
            .with_seed(s.seed)
            .with_scheme(self.cfg.scheme())
    }

    fn transfer_matrix(&self) -> anyhow::Result<TransferMatrix> {
        let grid = self.cfg.build_grid()?;
        let h = self.cfg.sampling.h;
        let mode = if self.model.is_linear_ou() {
            KernelMode::ExactOu
        } else {
            KernelMode::Composed { substeps: default_substeps(h) }
        };
        Ok(build_transfer_matrix(&self.model, h, &grid, mode)?)
    }

    fn estimator(&self) -> anyhow::Result<MeasureEstimator> {
        Ok(match self.cfg.calibration() {
            Calibration::Analytic => MeasureEstimator::ou_stationary(self.model.dim()),
            Calibration::Grid => {
                let plain = self.transfer_matrix()?;
                MeasureEstimator::Grid(invariant_density(&plain, &PowerOptions::default())?.eigenfunction)
            }
        })
    }

    fn calibrate(&self, est: &MeasureEstimator, tau: f64) -> anyhow::Result<ThresholdPlan> {
        Ok(calibrate_threshold(est, &self.x0, self.cfg.sampling.n, tau)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn record(&self, kind: &str, tau: f64, h: f64, n: usize, p_hat: f64, stderr: f64, target: f64, pass: bool) -> CsvRecord {
        CsvRecord {
            experiment_id: self.id(),
            kind: kind.to_string(),
            tau,
            h,
            n,
            trials: self.cfg.sampling.trials,
            p_hat,
            histogram: None,
            stderr,
            target,
            pass,
        }
    }
}

fn calibration_check(plan: &ThresholdPlan) -> Check {
    Check::at_most(format!("calibration[tau={}]", plan.tau), plan.calibration_error(), sdevl::evt::CALIBRATION_TOL)
}

/// Largest step `values[i + 1] - values[i]`; negative iff strictly decreasing.
fn largest_increase(values: &[f64]) -> f64 {
    values.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max)
}

/// Radii sorted from largest to smallest, keeping the original index.
fn descending(radii: &[f64]) -> Vec<(usize, f64)> {
    let mut v: Vec<(usize, f64)> = radii.iter().copied().enumerate().collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1));
    v
}

fn run_evl(s: &Setup<'_>) -> anyhow::Result<Output> {
    let cfg = s.cfg;
    let n = cfg.sampling.n;
    let hs = if cfg.params.h_list.is_empty() { vec![cfg.sampling.h] } else { cfg.params.h_list.clone() };
    let est = s.estimator()?;
    let mut out = Output::default();
    for &tau in &cfg.params.tau {
        let plan = s.calibrate(&est, tau)?;
        out.checks.push(calibration_check(&plan));
        let target = (-tau).exp();
        let mut per_h = Vec::new();
        for &h in &hs {
            let e = evl_estimate(&s.model, &plan, &s.sampling(h, n))?;
            let check = Check::within(format!("evl[tau={tau},h={h}]"), e.p_hat, target, 3.0 * e.stderr + 0.01);
            out.records.push(s.record("evl", tau, h, n, e.p_hat, e.stderr, target, check.pass));
            out.checks.push(check);
            per_h.push((h, e));
        }
        for i in 0..per_h.len() {
            for j in i + 1..per_h.len() {
                let ((hi, a), (hj, b)) = (&per_h[i], &per_h[j]);
                let sigma = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
                out.checks.push(Check::within(
                    format!("h_agreement[tau={tau},h={hi},h={hj}]"),
                    a.p_hat,
                    b.p_hat,
                    3.0 * sigma,
                ));
            }
        }
        out.details.insert(format!("radius[tau={tau}]"), json!(plan.radius));
    }
    Ok(out)
}

fn run_poisson(s: &Setup<'_>) -> anyhow::Result<Output> {
    let cfg = s.cfg;
    let est = s.estimator()?;
    let sampling = s.sampling(cfg.sampling.h, cfg.sampling.n);
    let mut out = Output::default();
    for &tau in &cfg.params.tau {
        let plan = s.calibrate(&est, tau)?;
        out.checks.push(calibration_check(&plan));
        let hist = poisson_counts(&s.model, &plan, &sampling)?;
        let gof = poisson_gof(&hist)?;
        let gof_check = Check::above(format!("poisson_gof[tau={tau}]"), gof.p_value, 0.01);
        let mean_check = Check::within(format!("poisson_mean[tau={tau}]"), hist.mean(), tau, 3.0 * hist.mean_stderr());
        let p0 = hist.frequency(0);
        let stderr0 = (p0 * (1.0 - p0) / hist.trials as f64).sqrt();
        let pass = gof_check.pass && mean_check.pass;
        out.records.push(
            s.record("poisson", tau, cfg.sampling.h, plan.poisson_horizon(), p0, stderr0, (-tau).exp(), pass)
                .with_histogram(&hist),
        );
        out.checks.push(gof_check);
        out.checks.push(mean_check);
        let mut pmf = 1.0;
        let rows: Vec<Value> = (0..hist.counts.len().max(4))
            .map(|k| {
                if k > 0 {
                    pmf *= tau / k as f64;
                }
                json!({"k": k, "frequency": hist.frequency(k), "poisson": (-tau).exp() * pmf})
            })
            .collect();
        out.details.insert(
            format!("tau={tau}"),
            json!({"gof": gof, "variance": hist.variance(), "frequencies": rows}),
        );
    }
    Ok(out)
}

fn spectral_record(m: &TransferMatrix, hole: Option<&HoleSpec>, lambda: [f64; 2], residual: f64, theta: Option<f64>, q: Vec<f64>) -> SpectralRecord {
    SpectralRecord { h: m.h(), grid: m.grid().clone(), hole: hole.cloned(), lambda, residual, theta, q }
}

fn run_spectrum(s: &Setup<'_>) -> anyhow::Result<Output> {
    let cfg = s.cfg;
    let opts = PowerOptions::default();
    let plain = s.transfer_matrix()?;
    let grid = plain.grid().clone();
    let inv = invariant_density(&plain, &opts)?;
    let f0 = &inv.eigenfunction;
    let mut out = Output::default();

    let lambda = inv.eigenvalue.re;
    out.spectral.push(spectral_record(&plain, None, [lambda, inv.eigenvalue.im], inv.residual, None, Vec::new()));
    out.checks.push(Check::within("lambda_plain", lambda, 1.0, (2.0 * plain.truncation_loss()).max(1e-8)));
    let min = f0.values().iter().copied().fold(f64::INFINITY, f64::min);
    out.checks.push(Check::above("density_min", min, 0.0));
    if s.model.is_linear_ou() {
        let norm = std::f64::consts::PI.powf(-(grid.dim() as f64) / 2.0);
        let vol = grid.cell_volume();
        let err: f64 = (0..grid.len())
            .map(|i| {
                let x = grid.center(i);
                (f0.values()[i] - norm * (-x.iter().map(|v| v * v).sum::<f64>()).exp()).abs() * vol
            })
            .sum();
        out.checks.push(Check::below("density_l1_error", err, 1e-2));
    }

    let mut deviations = Vec::new();
    for (_, r) in descending(&cfg.params.radii) {
        let hole = HoleSpec::new(&grid, &s.x0, r)?;
        let holed = plain.apply_hole(&hole)?;
        let res = leading_eigenvalue(&holed, &opts)?;
        let mu = hole.mass(f0);
        let ratio = (1.0 - res.eigenvalue.re) / mu;
        out.spectral.push(spectral_record(&holed, Some(&hole), [res.eigenvalue.re, res.eigenvalue.im], res.residual, Some(ratio), Vec::new()));
        out.checks.push(Check::within(format!("eigen_ratio[r={r}]"), ratio, 1.0, 0.3));
        deviations.push((ratio - 1.0).abs());
        out.details.insert(format!("r={r}"), json!({"mu": mu, "lambda": res.eigenvalue.re, "ratio": ratio}));

        if !cfg.params.s.is_empty() {
            let rows = twisted_eigenvalue_expansion(&plain, &hole, &cfg.params.s, f0, &opts)?;
            for row in &rows {
                out.checks.push(Check::at_most(format!("twist[r={r},s={:.4}]", row.s), row.error, 0.5 * row.mu_hole));
            }
            out.details.insert(format!("twist[r={r}]"), json!(rows));
        }
    }
    if deviations.len() >= 2 {
        out.checks.push(Check::below("eigen_ratio_trend", largest_increase(&deviations), 0.0));
    }
    Ok(out)
}

fn run_kl(s: &Setup<'_>) -> anyhow::Result<Output> {
    let cfg = s.cfg;
    let opts = PowerOptions::default();
    let plain = s.transfer_matrix()?;
    let grid = plain.grid().clone();
    let f0 = invariant_density(&plain, &opts)?.eigenfunction;
    let mut out = Output::default();

    let order = descending(&cfg.params.radii);
    let mut sums = Vec::new();
    for &(_, r) in &order {
        let hole = HoleSpec::new(&grid, &s.x0, r)?;
        let holed = plain.apply_hole(&hole)?;
        let rep = kl_quantities(&plain, &holed, &f0, cfg.params.k_max)?;
        let res = leading_eigenvalue(&holed, &opts)?;
        let q_min = rep.q.iter().copied().fold(f64::INFINITY, f64::min);
        out.checks.push(Check::at_least(format!("q_min[r={r}]"), q_min, 0.0));
        out.checks.push(Check::at_most(format!("q_sum_le_one[r={r}]"), rep.q_sum, 1.0));
        out.spectral.push(spectral_record(&holed, Some(&hole), [res.eigenvalue.re, res.eigenvalue.im], res.residual, Some(rep.theta), rep.q.clone()));
        sums.push(rep.q_sum);
        out.details.insert(format!("r={r}"), json!(rep));
    }
    if let Some(&(_, r_min)) = order.last() {
        out.checks.push(Check::at_most(format!("q_sum_small[r={r_min}]"), *sums.last().unwrap_or(&f64::NAN), 0.1));
    }
    if sums.len() >= 2 {
        out.checks.push(Check::below("q_sum_trend", largest_increase(&sums), 0.0));
    }

    if cfg.params.cross_check {
        if grid.dim() != 1 {
            bail!("the operator cross-check needs a one-dimensional grid");
        }
        let cell = grid.cell_of(&s.x0).context("x0 is outside the grid")?;
        let center = grid.center(cell);
        let r = 0.5 * grid.cell_width();
        let hole = HoleSpec::new(&grid, &center, r)?;
        let holed = plain.apply_hole(&hole)?;
        let est = MeasureEstimator::Grid(f0.clone());
        for &tau in &cfg.params.tau {
            let n = (tau / hole.mass(&f0)).round().max(1.0) as usize;
            let p_op = evl_via_operator(&holed, &f0, n)?;
            let plan = ThresholdPlan::from_radius(&est, &center, r, n)?;
            let e = evl_estimate(&s.model, &plan, &s.sampling(cfg.sampling.h, n))?;
            let check = Check::within(format!("cross_check[tau={tau}]"), e.p_hat, p_op, 3.0 * e.stderr + 0.02);
            out.records.push(s.record("cross_check", tau, cfg.sampling.h, n, e.p_hat, e.stderr, p_op, check.pass));
            out.checks.push(check);
            out.details.insert(format!("cross_check[tau={tau}]"), json!({"n": n, "radius": r, "operator": p_op, "monte_carlo": e}));
        }
    }
    Ok(out)
}

fn run_ly_fit(s: &Setup<'_>) -> anyhow::Result<Output> {
    let cfg = s.cfg;
    let plain = s.transfer_matrix()?;
    let grid = plain.grid().clone();
    let set = default_test_set(&grid);
    let ctx = SpacesContext::standard(&grid);
    let opts = LyOptions::default();
    let mut out = Output::default();
    let mut fit_one = |label: String, m: &TransferMatrix| -> anyhow::Result<()> {
        let fit = lasota_yorke_fit(m, &set, &ctx, &opts)?;
        out.checks.push(Check::below(format!("ly_lambda[{label}]"), fit.lambda, 1.0));
        out.checks.push(Check::at_most(format!("ly_a[{label}]"), fit.a, opts.a_cap));
        out.checks.push(Check::at_most(format!("ly_b[{label}]"), fit.b, opts.b_cap));
        out.details.insert(label, json!(fit));
        Ok(())
    };
    fit_one("plain".into(), &plain)?;
    for &r in &cfg.params.radii {
        let hole = HoleSpec::new(&grid, &s.x0, r)?;
        fit_one(format!("r={r}"), &plain.apply_hole(&hole)?)?;
    }
    Ok(out)
}

fn run_refine(s: &Setup<'_>) -> anyhow::Result<Output> {
    let cfg = s.cfg;
    let est = s.estimator()?;
    let sampling = s.sampling(cfg.sampling.h, cfg.sampling.n);
    let mut out = Output::default();
    for &tau in &cfg.params.tau {
        let plan = s.calibrate(&est, tau)?;
        out.checks.push(calibration_check(&plan));
        let rows = time_refinement_experiment(&s.model, &plan, &sampling, &cfg.params.m_list)?;
        for row in &rows {
            let check = Check::within(format!("refine[tau={tau},M={}]", row.m), row.p_hat, row.target, 3.0 * row.stderr + 0.015);
            let h = cfg.sampling.h / row.m as f64;
            out.records.push(s.record("refine", tau, h, cfg.sampling.n * row.m, row.p_hat, row.stderr, row.target, check.pass));
            out.checks.push(check);
        }
        let mut sorted = rows.clone();
        sorted.sort_by_key(|r| r.m);
        let survivors: Vec<f64> = sorted.iter().map(|r| r.survivors as f64).collect();
        if survivors.len() >= 2 {
            out.checks.push(Check::at_most(format!("refine_nested[tau={tau}]"), largest_increase(&survivors), 0.0));
        }
        out.details.insert(format!("tau={tau}"), json!(rows));
    }
    Ok(out)
}

fn noise_label(noise: &NoiseSpec) -> String {
    match noise {
        NoiseSpec::Delta => "delta".into(),
        NoiseSpec::Uniform { width } => format!("uniform({width})"),
        NoiseSpec::Gaussian { sigma } => format!("gaussian({sigma})"),
    }
}

fn run_blocks(s: &Setup<'_>) -> anyhow::Result<Output> {
    let cfg = s.cfg;
    let mut out = Output::default();
    let mut tag = 0u64;
    for &tau in &cfg.params.tau {
        for noise in &cfg.params.noise {
            let seed = derive_seed(cfg.sampling.seed, tag);
            tag += 1;
            let res = block_sequence_experiment(cfg.params.block_m, *noise, cfg.sampling.n, tau, cfg.sampling.trials, seed)?;
            let budget = if noise.is_diffuse() { 0.015 } else { 0.01 };
            let label = format!("{},M={},tau={tau}", noise_label(noise), res.m);
            let check = Check::within(format!("blocks[{label}]"), res.p_hat, res.target, 3.0 * res.stderr + budget);
            out.records.push(s.record(
                &format!("blocks:{}", noise_label(noise)),
                tau,
                f64::NAN,
                res.n * res.m,
                res.p_hat,
                res.stderr,
                res.target,
                check.pass,
            ));
            out.checks.push(check);
            out.checks.push(Check::within(format!("blocks_oracle[{label}]"), res.p_hat, res.oracle, 3.0 * res.stderr + budget));
            out.details.insert(label, json!(res));
        }
    }
    Ok(out)
}

fn run_norms(s: &Setup<'_>) -> anyhow::Result<Output> {
    let plain = s.transfer_matrix()?;
    let grid = plain.grid().clone();
    let ctx = SpacesContext::standard(&grid);
    let mut set = default_test_set(&grid);
    set.push(invariant_density(&plain, &PowerOptions::default())?.eigenfunction);
    let region = CompactBox::cube(grid.dim(), grid.half_width() / 2.0);
    let mut out = Output::default();
    let bvs: Vec<f64> = set.iter().map(|f| ctx.bv_norm(f)).collect::<sdevl::Result<_>>()?;
    let mut rows = Vec::new();
    for (i, f) in set.iter().enumerate() {
        let sup = sup_bound_check(f, &ctx, &region)?;
        out.checks.push(Check::at_most(format!("sup_bound[{i}]"), sup.lhs, sup.bound));
        out.checks.push(Check::above(format!("bv_positive[{i}]"), bvs[i], 0.0));
        let scaled = ctx.bv_norm(&f.scaled(-2.5))?;
        out.checks.push(Check::within(format!("bv_homogeneity[{i}]"), scaled, 2.5 * bvs[i], 1e-12 * bvs[i]));
        let weighted = weighted_l1_norm(f, ctx.alpha)?;
        let lighter = weighted_l1_norm(f, ctx.alpha / 2.0)?;
        out.checks.push(Check::at_most(format!("weight_monotone[{i}]"), lighter, weighted * (1.0 + 1e-12)));
        rows.push(json!({
            "l1": f.l1_norm(),
            "weighted_l1": weighted,
            "oscillation": oscillation_seminorm(f, &ctx.psi, &ctx.eps_list)?,
            "bv": bvs[i],
            "sup_bound": sup,
        }));
    }
    for i in 0..set.len() {
        for j in i + 1..set.len() {
            let sum = bv_norm(&set[i].sum(&set[j])?, ctx.alpha, &ctx.psi, &ctx.eps_list)?;
            let bound = bvs[i] + bvs[j];
            out.checks.push(Check::at_most(format!("bv_triangle[{i},{j}]"), sum, bound * (1.0 + 1e-12)));
        }
    }
    out.details.insert("functions".into(), Value::Array(rows));
    Ok(out)
}

/// Paths written by [`write_outputs`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputFiles {
    pub result: PathBuf,
    pub csv: Option<PathBuf>,
    pub spectral: Option<PathBuf>,
}

fn write_atomic(path: &Path, contents: &str) -> anyhow::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating a temporary file in {}", dir.display()))?;
    tmp.write_all(contents.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Writes `<id>.result.json`, plus `<id>.csv` and `<id>.spectral.jsonl`
/// when the result carries rows for them. Each file is written to a
/// temporary name and renamed into place.
pub fn write_outputs(result: &ExperimentResult, dir: &Path) -> anyhow::Result<OutputFiles> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let id = &result.experiment_id;
    let mut files = OutputFiles { result: dir.join(format!("{id}.result.json")), csv: None, spectral: None };
    if !result.records.is_empty() {
        let path = dir.join(format!("{id}.csv"));
        write_atomic(&path, &to_csv(&result.records))?;
        files.csv = Some(path);
    }
    if !result.spectral.is_empty() {
        let path = dir.join(format!("{id}.spectral.jsonl"));
        let lines: String = result.spectral.iter().map(|r| r.to_json() + "\n").collect();
        write_atomic(&path, &lines)?;
        files.spectral = Some(path);
    }
    write_atomic(&files.result, &(serde_json::to_string_pretty(result)? + "\n"))?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn relations() {
        assert!(Check::within("a", 1.0, 1.05, 0.1).pass);
        assert!(!Check::within("a", 1.0, 1.2, 0.1).pass);
        assert!(Check::at_most("a", 1.0, 1.0).pass);
        assert!(!Check::below("a", 1.0, 1.0).pass);
        assert!(Check::above("a", 1e-300, 0.0).pass);
        assert!(!Check::at_least("a", f64::NAN, 0.0).pass);
    }

    proptest! {
        #[test]
        fn pass_is_a_function_of_the_numbers(v in -10.0f64..10.0, t in -10.0f64..10.0, tol in 0.0f64..5.0, rel in 0usize..5) {
            let relation = [Relation::Within, Relation::AtMost, Relation::AtLeast, Relation::Below, Relation::Above][rel];
            let c = Check::new("p", v, t, tol, relation);
            let back: Check = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
            prop_assert_eq!(back.evaluate(), c.pass);
        }
    }

    #[test]
    fn spectrum_without_hole_has_unit_eigenvalue() {
        let mut cfg = ExperimentConfig::new("spec", Kind::Spectrum);
        cfg.grid.m = 128;
        let res = run(&cfg).unwrap();
        let c = res.checks.iter().find(|c| c.name == "lambda_plain").unwrap();
        assert!(c.pass && (c.value - 1.0).abs() < 1e-8);
        assert_eq!(res.spectral.len(), 1);
    }

    #[test]
    fn two_dimensional_spectrum_runs() {
        let mut cfg = ExperimentConfig::new("spec2", Kind::Spectrum);
        cfg.model.dim = 2;
        cfg.grid.half_width = 4.0;
        cfg.grid.m = 40;
        cfg.params.radii = vec![0.5];
        let res = run(&cfg).unwrap();
        for name in ["lambda_plain", "density_min"] {
            assert!(res.checks.iter().any(|c| c.name == name && c.pass), "{name}: {:?}", res.checks);
        }
        let ratio = res.checks.iter().find(|c| c.name.starts_with("eigen_ratio")).unwrap().value;
        assert!(ratio > 0.5 && ratio < 1.0, "{ratio}");
    }

    #[test]
    fn evl_reports_the_gumbel_target() {
        let mut cfg = ExperimentConfig::new("evl", Kind::Evl);
        cfg.sampling.n = 200;
        cfg.sampling.trials = 2000;
        let res = run(&cfg).unwrap();
        assert_eq!(res.records.len(), 1);
        assert!((res.records[0].target - (-1.0f64).exp()).abs() < 1e-15);
        assert!(res.passed(), "{:?}", res.checks);
    }

    #[test]
    fn outputs_are_reproducible() {
        let mut cfg = ExperimentConfig::new("det", Kind::Poisson);
        cfg.sampling.n = 100;
        cfg.sampling.trials = 1000;
        cfg.sampling.seed = 17;
        let dir = tempfile::tempdir().unwrap();
        let read = |p: &Path| std::fs::read(p).unwrap();
        let a = write_outputs(&run(&cfg).unwrap(), &dir.path().join("a")).unwrap();
        let b = write_outputs(&run(&cfg).unwrap(), &dir.path().join("b")).unwrap();
        assert_eq!(read(a.csv.as_ref().unwrap()), read(b.csv.as_ref().unwrap()));
        let strip = |p: &Path| {
            let mut v: Value = serde_json::from_slice(&read(p)).unwrap();
            v.as_object_mut().unwrap().remove("wall_time_s");
            v
        };
        assert_eq!(strip(&a.result), strip(&b.result));
    }
}
