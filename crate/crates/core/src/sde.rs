//! Drift models, numerical checks of the Lipschitz and dissipativity
//! hypotheses, and samplers for `dX_t = b(X_t) dt + dW_t` at `t_k = k h`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub type State = Vec<f64>;

type DriftFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

#[derive(Clone)]
enum Drift {
    /// b(x) = -x
    Ou,
    /// b(x) = -x + c
    OuShift(Vec<f64>),
    /// b_i(x) = x_i - x_i^3
    DoubleWell,
    /// b(x) = A x
    Linear(DMatrix<f64>),
    Custom(Arc<DriftFn>),
}

/// A drift field together with its declared constants: Lipschitz constant
/// `K` and dissipativity constants `R1`, `R2` in `<b(x), x> <= R1 - R2 |x|^2`.
#[derive(Clone)]
pub struct DriftModel {
    name: String,
    dim: usize,
    drift: Drift,
    lipschitz: f64,
    r1: f64,
    r2: f64,
    linear_ou: bool,
}

impl fmt::Debug for DriftModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriftModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("lipschitz", &self.lipschitz)
            .field("r1", &self.r1)
            .field("r2", &self.r2)
            .field("linear_ou", &self.linear_ou)
            .finish()
    }
}

impl DriftModel {
    /// Ornstein-Uhlenbeck drift `b(x) = -x`; enables exact sampling.
    pub fn ou(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        Ok(Self {
            name: "ou".into(),
            dim,
            drift: Drift::Ou,
            lipschitz: 1.0,
            r1: 0.0,
            r2: 1.0,
            linear_ou: true,
        })
    }

    /// `b(x) = -x + c`. Dissipativity holds with `R1 = |c|^2 / 2`, `R2 = 1/2`.
    pub fn ou_shift(shift: Vec<f64>) -> Result<Self> {
        check_dim(shift.len())?;
        if shift.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("ou_shift: non-finite shift".into()));
        }
        let norm2: f64 = shift.iter().map(|c| c * c).sum();
        Ok(Self {
            name: "ou_shift".into(),
            dim: shift.len(),
            drift: Drift::OuShift(shift),
            lipschitz: 1.0,
            r1: 0.5 * norm2,
            r2: 0.5,
            linear_ou: false,
        })
    }

    /// Coordinatewise double well `b_i(x) = x_i - x_i^3`.
    ///
    /// The drift is only locally Lipschitz; the declared constant
    /// `K = max(1, 3 rho^2 - 1)` is valid on the cube of half-width
    /// `box_radius = rho`. Dissipativity holds globally with `R1 = d`,
    /// `R2 = 1` since `2x^2 - x^4 <= 1`.
    pub fn double_well(dim: usize, box_radius: f64) -> Result<Self> {
        check_dim(dim)?;
        if !(box_radius > 0.0 && box_radius.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "double_well: box radius must be positive, got {box_radius}"
            )));
        }
        Ok(Self {
            name: "double_well".into(),
            dim,
            drift: Drift::DoubleWell,
            lipschitz: (3.0 * box_radius * box_radius - 1.0).max(1.0),
            r1: dim as f64,
            r2: 1.0,
            linear_ou: false,
        })
    }

    /// Linear drift `b(x) = A x`. `K` is the spectral norm of `A` and `R2`
    /// is minus the largest eigenvalue of its symmetric part, which must be
    /// negative.
    pub fn custom_linear(a: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::InvalidArgument("custom_linear: matrix must be square".into()));
        }
        check_dim(a.nrows())?;
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("custom_linear: non-finite entry".into()));
        }
        let sym = (&a + a.transpose()) * 0.5;
        let top = SymmetricEigen::new(sym).eigenvalues.max();
        if top >= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "custom_linear: symmetric part has eigenvalue {top} >= 0, drift is not dissipative"
            )));
        }
        let k = a.clone().svd(false, false).singular_values.max();
        Ok(Self {
            name: "custom_linear".into(),
            dim: a.nrows(),
            drift: Drift::Linear(a),
            lipschitz: k,
            r1: 0.0,
            r2: -top,
            linear_ou: false,
        })
    }

    /// Arbitrary drift with user-declared constants. The constants are not
    /// verified here; see [`check_lipschitz`] and [`check_dissipativity`].
    pub fn custom<F>(name: &str, dim: usize, drift: F, lipschitz: f64, r1: f64, r2: f64) -> Result<Self>
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        check_dim(dim)?;
        if !(lipschitz >= 0.0 && lipschitz.is_finite()) {
            return Err(Error::InvalidArgument(format!("lipschitz constant must be >= 0, got {lipschitz}")));
        }
        if !r1.is_finite() || !(r2 > 0.0 && r2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "dissipativity constants need R1 finite and R2 > 0, got R1 = {r1}, R2 = {r2}"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            dim,
            drift: Drift::Custom(Arc::new(drift)),
            lipschitz,
            r1,
            r2,
            linear_ou: false,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn r1(&self) -> f64 {
        self.r1
    }

    pub fn r2(&self) -> f64 {
        self.r2
    }

    /// True for `b(x) = -x`, the case with closed-form transitions.
    pub fn is_linear_ou(&self) -> bool {
        self.linear_ou
    }

    /// Stationary second-moment scale `(2 R1 + d) / (2 R2)`.
    pub fn moment_bound(&self) -> f64 {
        (2.0 * self.r1 + self.dim as f64) / (2.0 * self.r2)
    }

    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        match &self.drift {
            Drift::Ou => {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = -xi;
                }
            }
            Drift::OuShift(c) => {
                for ((o, xi), ci) in out.iter_mut().zip(x).zip(c) {
                    *o = ci - xi;
                }
            }
            Drift::DoubleWell => {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = xi - xi * xi * xi;
                }
            }
            Drift::Linear(a) => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (0..self.dim).map(|j| a[(i, j)] * x[j]).sum();
                }
            }
            Drift::Custom(f) => f(x, out),
        }
    }

    pub fn drift(&self, x: &[f64]) -> State {
        let mut out = vec![0.0; self.dim];
        self.drift_into(x, &mut out);
        out
    }

    fn checked_drift(&self, x: &[f64]) -> Result<State> {
        let b = self.drift(x);
        if b.iter().all(|v| v.is_finite()) {
            Ok(b)
        } else {
            Err(Error::NonFiniteDrift { point: x.to_vec() })
        }
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 {
        Err(Error::InvalidArgument("dimension must be positive".into()))
    } else {
        Ok(())
    }
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

fn uniform_point<R: Rng + ?Sized>(rng: &mut R, dim: usize, radius: f64) -> State {
    (0..dim).map(|_| rng.random_range(-radius..=radius)).collect()
}

fn check_sampling_args(sample_count: usize, box_radius: f64) -> Result<()> {
    if sample_count < 2 {
        return Err(Error::InvalidArgument(format!("sample_count must be >= 2, got {sample_count}")));
    }
    if !(box_radius > 0.0 && box_radius.is_finite()) {
        return Err(Error::InvalidArgument(format!("box_radius must be positive, got {box_radius}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub max_ratio: f64,
    pub worst_pair: (State, State),
    pub pass: bool,
}

/// Largest `|b(x) - b(y)| / |x - y|` over random pairs in `[-R, R]^d`.
///
/// Half of the pairs are far apart and half are local perturbations, so the
/// estimate sees both global growth and the local slope.
pub fn check_lipschitz(model: &DriftModel, sample_count: usize, box_radius: f64, seed: u64) -> Result<LipschitzReport> {
    check_sampling_args(sample_count, box_radius)?;
    let mut rng = rng::stream(seed, 0);
    let d = model.dim();
    let mut best = (0.0_f64, (vec![0.0; d], vec![0.0; d]));
    for k in 0..sample_count {
        let x = uniform_point(&mut rng, d, box_radius);
        let y = if k % 2 == 0 {
            uniform_point(&mut rng, d, box_radius)
        } else {
            // fixed separation keeps cancellation error in the ratio near 1e-13
            let dir: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let len = norm(&dir).max(1e-300);
            x.iter().zip(&dir).map(|(xi, u)| xi + 1e-3 * box_radius * u / len).collect()
        };
        let sep = dist(&x, &y);
        if sep == 0.0 {
            continue;
        }
        let bx = model.checked_drift(&x)?;
        let by = model.checked_drift(&y)?;
        let ratio = dist(&bx, &by) / sep;
        if ratio > best.0 {
            best = (ratio, (x, y));
        }
    }
    Ok(LipschitzReport {
        max_ratio: best.0,
        worst_pair: best.1,
        pass: best.0 <= model.lipschitz() * (1.0 + 1e-9),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DissipativityReport {
    /// max over samples of `<b(x), x> - (R1 - R2 |x|^2)`.
    pub max_violation: f64,
    pub worst_point: State,
    pub pass: bool,
}

pub fn check_dissipativity(model: &DriftModel, sample_count: usize, box_radius: f64, seed: u64) -> Result<DissipativityReport> {
    check_sampling_args(sample_count, box_radius)?;
    let mut rng = rng::stream(seed, 1);
    let d = model.dim();
    let mut worst = (f64::NEG_INFINITY, vec![0.0; d]);
    for _ in 0..sample_count {
        let x = uniform_point(&mut rng, d, box_radius);
        let b = model.checked_drift(&x)?;
        let inner: f64 = b.iter().zip(&x).map(|(bi, xi)| bi * xi).sum();
        let norm2: f64 = x.iter().map(|v| v * v).sum();
        let violation = inner - (model.r1() - model.r2() * norm2);
        if violation > worst.0 {
            worst = (violation, x);
        }
    }
    Ok(DissipativityReport {
        max_violation: worst.0,
        worst_point: worst.1,
        pass: worst.0 <= 0.0,
    })
}

pub const DEFAULT_SUBSTEPS: usize = 50;
pub const DEFAULT_BLOW_UP: f64 = 1e6;

/// How the chain is advanced between sampling times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// One Gaussian per coordinate and step; only for `b(x) = -x`.
    ExactOu,
    /// `substeps` Euler-Maruyama steps per sampling interval.
    EulerMaruyama,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    /// Sampling step `h`.
    pub h: f64,
    /// Samples per trajectory, at `t_0, ..., t_{n-1}`.
    pub n: usize,
    /// Fine steps per `h` for Euler-Maruyama.
    pub substeps: usize,
    pub seed: u64,
    pub trajectories: usize,
    pub scheme: Scheme,
    pub blow_up: f64,
}

impl SamplingPlan {
    pub fn new(h: f64, n: usize) -> Self {
        Self {
            h,
            n,
            substeps: DEFAULT_SUBSTEPS,
            seed: 0,
            trajectories: 1,
            scheme: Scheme::EulerMaruyama,
            blow_up: DEFAULT_BLOW_UP,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_trajectories(mut self, trajectories: usize) -> Self {
        self.trajectories = trajectories;
        self
    }

    pub fn with_substeps(mut self, substeps: usize) -> Self {
        self.substeps = substeps;
        self
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    /// Fine integrator step `h / substeps`.
    pub fn delta(&self) -> f64 {
        self.h / self.substeps as f64
    }

    /// `t_k = k h`, computed from the index.
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.h
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::InvalidArgument(format!("h must be positive, got {}", self.h)));
        }
        if self.n == 0 {
            return Err(Error::InvalidArgument("n must be >= 1".into()));
        }
        if self.substeps == 0 {
            return Err(Error::InvalidArgument("substeps must be >= 1".into()));
        }
        if !(self.blow_up > 0.0) {
            return Err(Error::InvalidArgument("blow-up bound must be positive".into()));
        }
        Ok(())
    }
}

/// States at `t_0, ..., t_{n-1}`, stored flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    dim: usize,
    states: Vec<f64>,
}

impl Trajectory {
    fn with_capacity(dim: usize, n: usize) -> Self {
        Self { dim, states: Vec::with_capacity(dim * n) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn initial(&self) -> &[f64] {
        self.state(0)
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.dim)
    }
}

/// Variance of one exact OU coordinate step: `(1 - e^{-2h}) / 2`.
pub fn ou_step_variance(h: f64) -> f64 {
    -(-2.0 * h).exp_m1() / 2.0
}

/// One Euler-Maruyama step `x + b(x) delta + sqrt(delta) xi`.
pub fn euler_maruyama_step(model: &DriftModel, x: &[f64], delta: f64, xi: &[f64]) -> State {
    let b = model.drift(x);
    let s = delta.sqrt();
    x.iter().zip(&b).zip(xi).map(|((xi0, bi), z)| xi0 + bi * delta + s * z).collect()
}

/// One exact OU step `e^{-h} x + sigma_h xi`.
pub fn exact_ou_step(x: &[f64], h: f64, xi: &[f64]) -> State {
    let a = (-h).exp();
    let s = ou_step_variance(h).sqrt();
    x.iter().zip(xi).map(|(xi0, z)| a * xi0 + s * z).collect()
}

/// Advances a state by one sampling interval. Shared by every sampler so
/// that trajectories and streaming Monte Carlo consume randomness the same
/// way.
#[derive(Debug, Clone)]
pub struct Stepper<'a> {
    model: &'a DriftModel,
    scheme: Scheme,
    dt: f64,
    substeps: usize,
    delta: f64,
    sqrt_delta: f64,
    decay: f64,
    sigma: f64,
    blow_up2: f64,
    blow_up: f64,
}

impl<'a> Stepper<'a> {
    /// Stepper over intervals of length `dt` (usually `plan.h`).
    pub fn new(model: &'a DriftModel, dt: f64, plan: &SamplingPlan) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("step must be positive, got {dt}")));
        }
        plan.validate()?;
        if plan.scheme == Scheme::ExactOu && !model.is_linear_ou() {
            return Err(Error::InvalidArgument(format!(
                "exact OU sampling requested for non-OU model '{}'",
                model.name()
            )));
        }
        let delta = dt / plan.substeps as f64;
        Ok(Self {
            model,
            scheme: plan.scheme,
            dt,
            substeps: plan.substeps,
            delta,
            sqrt_delta: delta.sqrt(),
            decay: (-dt).exp(),
            sigma: ou_step_variance(dt).sqrt(),
            blow_up2: plan.blow_up * plan.blow_up,
            blow_up: plan.blow_up,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Moves `x` from `t_k` to `t_{k+1}`; `k` is only used for diagnostics.
    pub fn advance<R: Rng + ?Sized>(&self, x: &mut [f64], k: usize, scratch: &mut [f64], rng: &mut R) -> Result<()> {
        match self.scheme {
            Scheme::ExactOu => {
                for xi in x.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *xi = self.decay * *xi + self.sigma * z;
                }
            }
            Scheme::EulerMaruyama => {
                for i in 0..self.substeps {
                    self.model.drift_into(x, scratch);
                    let mut norm2 = 0.0;
                    for (xi, bi) in x.iter_mut().zip(scratch.iter()) {
                        let z: f64 = rng.sample(StandardNormal);
                        *xi += bi * self.delta + self.sqrt_delta * z;
                        norm2 += *xi * *xi;
                    }
                    if !(norm2 <= self.blow_up2) {
                        let fine = k * self.substeps + i + 1;
                        return Err(Error::Diverged {
                            time: fine as f64 * self.delta,
                            norm: norm2.sqrt(),
                            bound: self.blow_up,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

fn sample_path<R: Rng + ?Sized>(stepper: &Stepper<'_>, x0: &[f64], n: usize, rng: &mut R) -> Result<Trajectory> {
    let d = x0.len();
    let mut traj = Trajectory::with_capacity(d, n);
    let mut x = x0.to_vec();
    let mut scratch = vec![0.0; d];
    traj.states.extend_from_slice(&x);
    for k in 1..n {
        stepper.advance(&mut x, k - 1, &mut scratch, rng)?;
        traj.states.extend_from_slice(&x);
    }
    Ok(traj)
}

fn check_start(model: &DriftModel, x0: &[f64]) -> Result<()> {
    if x0.len() != model.dim() {
        return Err(Error::InvalidArgument(format!(
            "initial point has dimension {}, model has {}",
            x0.len(),
            model.dim()
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("initial point is not finite".into()));
    }
    Ok(())
}

/// Euler-Maruyama path sampled every `plan.substeps` fine steps.
pub fn euler_maruyama_path<R: Rng + ?Sized>(model: &DriftModel, x0: &[f64], plan: &SamplingPlan, rng: &mut R) -> Result<Trajectory> {
    check_start(model, x0)?;
    let plan = plan.clone().with_scheme(Scheme::EulerMaruyama);
    let stepper = Stepper::new(model, plan.h, &plan)?;
    sample_path(&stepper, x0, plan.n, rng)
}

/// Exact OU path (`b(x) = -x`); `plan.substeps` is ignored.
pub fn exact_ou_path<R: Rng + ?Sized>(x0: &[f64], plan: &SamplingPlan, rng: &mut R) -> Result<Trajectory> {
    let model = DriftModel::ou(x0.len())?;
    check_start(&model, x0)?;
    let plan = plan.clone().with_scheme(Scheme::ExactOu);
    let stepper = Stepper::new(&model, plan.h, &plan)?;
    sample_path(&stepper, x0, plan.n, rng)
}

/// `plan.trajectories` paths from `x0`, path `i` driven by stream
/// `(plan.seed, i)`.
pub fn simulate_ensemble(model: &DriftModel, x0: &[f64], plan: &SamplingPlan) -> Result<Vec<Trajectory>> {
    check_start(model, x0)?;
    let stepper = Stepper::new(model, plan.h, plan)?;
    (0..plan.trajectories as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(plan.seed, i);
            sample_path(&stepper, x0, plan.n, &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentReport {
    pub time: f64,
    /// Empirical `E|X_t|^2`.
    pub lhs: f64,
    /// `e^{-2 t R2} E|X_0|^2 + (2 R1 + d) / (2 R2)`.
    pub rhs: f64,
    pub stderr: f64,
    pub pass: bool,
}

/// Compares the ensemble second moment at `t` with the dissipative bound.
/// `t` must be a sampling time `k h` of the ensemble.
pub fn second_moment_check(model: &DriftModel, ensemble: &[Trajectory], h: f64, t: f64) -> Result<MomentReport> {
    if ensemble.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let k = (t / h).round();
    if k < 0.0 || (k * h - t).abs() > 1e-9 * t.max(1.0) {
        return Err(Error::InvalidArgument(format!("t = {t} is not a multiple of h = {h}")));
    }
    let k = k as usize;
    if ensemble.iter().any(|tr| tr.len() <= k) {
        return Err(Error::InvalidArgument(format!("ensemble paths are shorter than t = {t}")));
    }
    let sq = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
    let count = ensemble.len() as f64;
    let initial = ensemble.iter().map(|tr| sq(tr.initial())).sum::<f64>() / count;
    let values: Vec<f64> = ensemble.iter().map(|tr| sq(tr.state(k))).collect();
    let mean = values.iter().sum::<f64>() / count;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (count - 1.0)
    } else {
        0.0
    };
    let stderr = (var / count).sqrt();
    let rhs = (-2.0 * t * model.r2()).exp() * initial + model.moment_bound();
    Ok(MomentReport {
        time: t,
        lhs: mean,
        rhs,
        stderr,
        pass: mean <= rhs + 3.0 * stderr,
    })
}

/// Default burn-in `20 / R2`.
pub fn default_burn_in(model: &DriftModel) -> f64 {
    20.0 / model.r2()
}

/// Endpoint of a path of length `burn_in` started at the origin.
///
/// OU uses one exact transition; other drifts integrate with
/// Euler-Maruyama at `delta = min(0.01, 0.1 / R2)`.
pub fn sample_stationary<R: Rng + ?Sized>(model: &DriftModel, burn_in: f64, rng: &mut R) -> Result<State> {
    if !(burn_in >= 0.0 && burn_in.is_finite()) {
        return Err(Error::InvalidArgument(format!("burn_in must be >= 0, got {burn_in}")));
    }
    let d = model.dim();
    let mut x = vec![0.0; d];
    if burn_in == 0.0 {
        return Ok(x);
    }
    if model.is_linear_ou() {
        let s = ou_step_variance(burn_in).sqrt();
        for xi in x.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *xi = s * z;
        }
        return Ok(x);
    }
    let delta_max = (0.1 / model.r2()).min(0.01);
    let steps = (burn_in / delta_max).ceil().max(1.0) as usize;
    let plan = SamplingPlan::new(burn_in, 2).with_substeps(steps);
    let stepper = Stepper::new(model, burn_in, &plan)?;
    let mut scratch = vec![0.0; d];
    stepper.advance(&mut x, 0, &mut scratch, rng)?;
    Ok(x)
}

/// Draw from the invariant law: exact `N(0, I/2)` for OU, burn-in otherwise.
pub fn draw_stationary<R: Rng + ?Sized>(model: &DriftModel, rng: &mut R) -> Result<State> {
    if model.is_linear_ou() {
        let s = 0.5_f64.sqrt();
        Ok((0..model.dim()).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect())
    } else {
        sample_stationary(model, default_burn_in(model), rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sin_model() -> DriftModel {
        DriftModel::custom("sin", 1, |x, o| o[0] = -x[0] + x[0].sin(), 2.0, 1.0, 0.25).unwrap()
    }

    #[test]
    fn lipschitz_of_linear_ou_is_one() {
        let r = check_lipschitz(&DriftModel::ou(2).unwrap(), 1000, 5.0, 1).unwrap();
        assert_abs_diff_eq!(r.max_ratio, 1.0, epsilon = 1e-12);
        assert!(r.pass);
    }

    #[test]
    fn lipschitz_of_sine_perturbation() {
        // oracle: dense scan of |b'(x)| = |cos x - 1| <= 2
        let scan = (0..200_001)
            .map(|i| -100.0 + i as f64 * 1e-3)
            .map(|x: f64| (x.cos() - 1.0).abs())
            .fold(0.0, f64::max);
        assert!(scan <= 2.0);
        let r = check_lipschitz(&sin_model(), 5000, 10.0, 3).unwrap();
        assert!(r.max_ratio <= scan + 1e-9);
        assert!(r.pass);
    }

    #[test]
    fn lipschitz_detects_quadratic() {
        // |b(10) - b(9)| / 1 = 19 > 1
        let m = DriftModel::custom("sq", 1, |x, o| o[0] = x[0] * x[0], 1.0, 0.0, 1.0).unwrap();
        assert_abs_diff_eq!((m.drift(&[10.0])[0] - m.drift(&[9.0])[0]).abs(), 19.0);
        let r = check_lipschitz(&m, 1000, 10.0, 0).unwrap();
        assert!(!r.pass);
        assert!(r.max_ratio > 1.0);
    }

    #[test]
    fn nonfinite_drift_is_reported() {
        let m = DriftModel::custom("bad", 1, |x, o| o[0] = 1.0 / (x[0] - x[0]), 1.0, 0.0, 1.0).unwrap();
        assert!(matches!(check_lipschitz(&m, 10, 1.0, 0), Err(Error::NonFiniteDrift { .. })));
        assert!(matches!(check_dissipativity(&m, 10, 1.0, 0), Err(Error::NonFiniteDrift { .. })));
    }

    #[test]
    fn dissipativity_examples() {
        let ou = check_dissipativity(&DriftModel::ou(1).unwrap(), 1000, 10.0, 0).unwrap();
        assert_eq!(ou.max_violation, 0.0);
        assert!(ou.pass);

        // -x^2 + x <= 1 - x^2/2, oracle: scan
        let shifted = DriftModel::custom("shift", 1, |x, o| o[0] = 1.0 - x[0], 1.0, 1.0, 0.5).unwrap();
        let scan = (0..20_001)
            .map(|i| -10.0 + i as f64 * 1e-3)
            .map(|x: f64| (-x * x + x) - (1.0 - 0.5 * x * x))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(scan <= -0.5 + 1e-12);
        assert!(check_dissipativity(&shifted, 1000, 10.0, 0).unwrap().pass);

        let unstable = DriftModel::custom("up", 1, |x, o| o[0] = x[0], 1.0, 5.0, 1.0).unwrap();
        assert!(!check_dissipativity(&unstable, 1000, 100.0, 0).unwrap().pass);
    }

    #[test]
    fn builtin_models_pass_their_declared_checks() {
        let models = [
            DriftModel::ou(2).unwrap(),
            DriftModel::ou_shift(vec![1.0, -0.5]).unwrap(),
            DriftModel::double_well(1, 2.0).unwrap(),
            DriftModel::custom_linear(DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, -0.5, -2.0])).unwrap(),
        ];
        for m in &models {
            assert!(check_lipschitz(m, 4000, 2.0, 5).unwrap().pass, "{}", m.name());
            assert!(check_dissipativity(m, 4000, 20.0, 5).unwrap().pass, "{}", m.name());
        }
        assert!(DriftModel::custom_linear(DMatrix::from_row_slice(1, 1, &[0.5])).is_err());
    }

    #[test]
    fn pure_diffusion_step() {
        let zero = DriftModel::custom("zero", 1, |_, o| o[0] = 0.0, 0.0, 0.0, 1.0).unwrap();
        assert_eq!(euler_maruyama_step(&zero, &[0.0], 1.0, &[0.5]), vec![0.5]);
    }

    #[test]
    fn noiseless_euler_tracks_exponential_flow() {
        let ou = DriftModel::ou(1).unwrap();
        let mut x = vec![1.0];
        for _ in 0..100 {
            x = euler_maruyama_step(&ou, &x, 0.01, &[0.0]);
        }
        // (1 - 0.01)^100 vs e^{-1}: error O(delta)
        assert!((x[0] - (-1.0_f64).exp()).abs() < 0.01);
    }

    #[test]
    fn exact_step_values() {
        assert_abs_diff_eq!(exact_ou_step(&[2.0], 2f64.ln(), &[0.0])[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ou_step_variance(60.0), 0.5);
        assert_abs_diff_eq!(ou_step_variance(0.5), (1.0 - (-1.0f64).exp()) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn exact_step_variance_monte_carlo() {
        let plan = SamplingPlan::new(0.5, 2).with_trajectories(1_000_000).with_seed(11).with_scheme(Scheme::ExactOu);
        let ens = simulate_ensemble(&DriftModel::ou(1).unwrap(), &[0.0], &plan).unwrap();
        let var = ens.iter().map(|t| t.state(1)[0].powi(2)).sum::<f64>() / ens.len() as f64;
        let expected = (1.0 - (-1.0f64).exp()) / 2.0;
        assert!((var - expected).abs() < 0.003, "{var} vs {expected}");
    }

    #[test]
    fn euler_ensemble_variance_near_stationary() {
        let plan = SamplingPlan::new(5.0, 3).with_trajectories(20_000).with_seed(2).with_substeps(250);
        let ens = simulate_ensemble(&DriftModel::ou(1).unwrap(), &[0.0], &plan).unwrap();
        let var = ens.iter().map(|t| t.state(2)[0].powi(2)).sum::<f64>() / ens.len() as f64;
        assert!((var - 0.5).abs() < 0.03, "{var}");
    }

    #[test]
    fn euler_converges_to_exact_marginal_as_delta_shrinks() {
        let ou = DriftModel::ou(1).unwrap();
        let exact = ou_step_variance(1.0);
        let mut errors = Vec::new();
        for delta in [0.1, 0.05, 0.025] {
            let steps = (1.0 / delta) as usize;
            // closed-form Euler variance of the linear recursion, then sampled check
            let plan = SamplingPlan::new(1.0, 2).with_substeps(steps).with_trajectories(200_000).with_seed(9);
            let ens = simulate_ensemble(&ou, &[0.0], &plan).unwrap();
            let var = ens.iter().map(|t| t.state(1)[0].powi(2)).sum::<f64>() / ens.len() as f64;
            let analytic: f64 = (0..steps).map(|k| delta * (1.0f64 - delta).powi(2 * k as i32)).sum();
            assert!((var - analytic).abs() < 0.006, "{var} vs {analytic}");
            errors.push((var - exact).abs());
        }
        assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
    }

    #[test]
    fn trajectories_are_deterministic() {
        let ou = DriftModel::double_well(1, 3.0).unwrap();
        let plan = SamplingPlan::new(0.5, 20).with_seed(42).with_trajectories(8);
        let a = simulate_ensemble(&ou, &[0.3], &plan).unwrap();
        let b = simulate_ensemble(&ou, &[0.3], &plan).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].len(), 20);
        assert_eq!(a[0].initial(), &[0.3]);
        assert!(a.iter().all(|t| t.iter().flatten().all(|v| v.is_finite())));
    }

    #[test]
    fn divergence_is_diagnosed() {
        let up = DriftModel::custom("up", 1, |x, o| o[0] = 5.0 * x[0], 5.0, 0.0, 1.0).unwrap();
        let plan = SamplingPlan::new(1.0, 20).with_substeps(10);
        let err = euler_maruyama_path(&up, &[1.0], &plan, &mut rng::stream(0, 0)).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn exact_sampler_rejects_non_ou_models() {
        let plan = SamplingPlan::new(1.0, 5).with_scheme(Scheme::ExactOu);
        let m = DriftModel::ou_shift(vec![1.0]).unwrap();
        assert!(simulate_ensemble(&m, &[0.0], &plan).is_err());
    }

    #[test]
    fn moment_bound_examples() {
        let plan = SamplingPlan::new(0.5, 21).with_trajectories(50_000).with_seed(3).with_scheme(Scheme::ExactOu);
        for d in [1, 2] {
            let ou = DriftModel::ou(d).unwrap();
            let ens = simulate_ensemble(&ou, &vec![0.0; d], &plan).unwrap();
            let at0 = second_moment_check(&ou, &ens, 0.5, 0.0).unwrap();
            assert_eq!(at0.lhs, 0.0);
            assert!(at0.pass);
            let late = second_moment_check(&ou, &ens, 0.5, 10.0).unwrap();
            assert_abs_diff_eq!(late.rhs, d as f64 / 2.0, epsilon = 1e-12);
            assert!(late.pass);
            assert!((late.lhs - late.rhs).abs() < 0.02 * late.rhs, "{late:?}");
        }
        assert!(matches!(
            second_moment_check(&DriftModel::ou(1).unwrap(), &[], 0.5, 1.0),
            Err(Error::EmptyEnsemble)
        ));
    }

    #[test]
    fn stationary_draws() {
        let ou = DriftModel::ou(1).unwrap();
        assert_eq!(sample_stationary(&ou, 0.0, &mut rng::stream(0, 0)).unwrap(), vec![0.0]);
        let draws: Vec<f64> = (0..100_000u64)
            .into_par_iter()
            .map(|i| sample_stationary(&ou, default_burn_in(&ou), &mut rng::stream(5, i)).unwrap()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 0.5).abs() < 0.01, "{var}");

        let ou3 = DriftModel::ou(3).unwrap();
        let pts: Vec<State> = (0..50_000u64)
            .into_par_iter()
            .map(|i| sample_stationary(&ou3, 20.0, &mut rng::stream(6, i)).unwrap())
            .collect();
        let n = pts.len() as f64;
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            let cov = pts.iter().map(|p| p[a] * p[b]).sum::<f64>() / n;
            // 4 standard errors of a product of independent N(0,1/2)
            assert!(cov.abs() < 4.0 * 0.5 / n.sqrt(), "cov({a},{b}) = {cov}");
        }
    }

    #[test]
    fn burn_in_for_nonlinear_model_stays_finite() {
        let dw = DriftModel::double_well(1, 3.0).unwrap();
        let x = sample_stationary(&dw, default_burn_in(&dw), &mut rng::stream(1, 1)).unwrap();
        assert!(x[0].is_finite() && x[0].abs() < 5.0);
    }
}
