//! Monte Carlo side: threshold calibration `n μ(B_n) = τ`, the probability
//! that `n` samples all avoid the ball, visit-count statistics and their
//! Poisson goodness of fit.

mod appendix;
mod record;

pub use appendix::{
    block_sequence_experiment, block_survival_oracle, convolved_ball_mass, time_refinement_experiment, BlockResult,
    NoiseSpec, RefineRow,
};
pub use record::{to_csv, CsvRecord, CSV_HEADER};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Discrete, DiscreteCDF, Poisson};
use statrs::function::erf::erf;
use statrs::function::gamma::gamma_lr;

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::sde::{dist, draw_stationary, DriftModel, SamplingPlan, State, Stepper};
use crate::spaces::GridFunction;

/// How `μ(B(x₀, r))` is evaluated.
#[derive(Debug, Clone)]
pub enum MeasureEstimator {
    /// `N(mean, variance · I)`.
    AnalyticGaussian { mean: State, variance: f64 },
    /// Cellwise-constant density; cells are cut exactly by the interval in
    /// one dimension and by a linear ramp of width one cell in higher ones.
    Grid(GridFunction),
}

impl MeasureEstimator {
    /// Invariant law `N(0, I/2)` of `dX = -X dt + dW`.
    pub fn ou_stationary(dim: usize) -> Self {
        Self::AnalyticGaussian { mean: vec![0.0; dim], variance: 0.5 }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::AnalyticGaussian { mean, .. } => mean.len(),
            Self::Grid(f) => f.grid().dim(),
        }
    }

    /// Mass available to arbitrarily large balls.
    pub fn total_mass(&self) -> f64 {
        match self {
            Self::AnalyticGaussian { .. } => 1.0,
            Self::Grid(f) => f.mass(),
        }
    }

    pub fn ball_mass(&self, center: &[f64], r: f64) -> Result<f64> {
        if center.len() != self.dim() {
            return Err(Error::InvalidArgument("ball centre has the wrong dimension".into()));
        }
        if r <= 0.0 {
            return Ok(0.0);
        }
        match self {
            Self::AnalyticGaussian { mean, variance } => {
                let s = (2.0 * variance).sqrt();
                if mean.len() == 1 {
                    let (lo, hi) = (center[0] - r - mean[0], center[0] + r - mean[0]);
                    if lo >= 0.0 || hi <= 0.0 {
                        // same-sign tails: difference of erfc avoids cancellation
                        let e = |z: f64| statrs::function::erf::erfc(z.abs() / s);
                        return Ok(0.5 * (e(lo.min(hi)) - e(lo.max(hi))).abs());
                    }
                    return Ok(0.5 * (erf(hi / s) - erf(lo / s)));
                }
                if dist(center, mean) > 0.0 {
                    return Err(Error::InvalidArgument(
                        "analytic ball mass in d > 1 needs the ball centred at the mean".into(),
                    ));
                }
                Ok(gamma_lr(mean.len() as f64 / 2.0, r * r / (2.0 * variance)))
            }
            Self::Grid(f) => {
                let grid = f.grid();
                let w = grid.cell_width();
                let vol = grid.cell_volume();
                let vals = f.values();
                let mass = if grid.dim() == 1 {
                    (0..grid.len())
                        .map(|i| {
                            let c = grid.axis_center(i);
                            let overlap = ((c + w / 2.0).min(center[0] + r) - (c - w / 2.0).max(center[0] - r)).max(0.0);
                            vals[i] * overlap
                        })
                        .sum()
                } else {
                    (0..grid.len())
                        .map(|i| {
                            let cover = ((r - dist(&grid.center(i), center)) / w + 0.5).clamp(0.0, 1.0);
                            vals[i] * cover * vol
                        })
                        .sum()
                };
                Ok(mass)
            }
        }
    }
}

/// Calibration tolerance on `n μ(B) - τ`, relative to `τ`.
pub const CALIBRATION_TOL: f64 = 1e-4;

/// Ball `B(x₀, r_n)` with `n μ(B) ≈ τ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPlan {
    pub tau: f64,
    pub center: State,
    pub n: usize,
    pub radius: f64,
    /// `u_n = -ln r_n`
    pub level: f64,
    /// `μ(B(x₀, r_n))`
    pub mass: f64,
}

impl ThresholdPlan {
    /// Plan for a given radius; `τ` is set to `n μ(B)`.
    pub fn from_radius(estimator: &MeasureEstimator, center: &[f64], radius: f64, n: usize) -> Result<Self> {
        if !(radius > 0.0) || n == 0 {
            return Err(Error::InvalidArgument("radius and n must be positive".into()));
        }
        let mass = estimator.ball_mass(center, radius)?;
        Ok(Self { tau: n as f64 * mass, center: center.to_vec(), n, radius, level: -radius.ln(), mass })
    }

    /// `|n μ(B) - τ| / τ`
    pub fn calibration_error(&self) -> f64 {
        (self.n as f64 * self.mass - self.tau).abs() / self.tau
    }

    /// Samples per trajectory in the visit count: `⌊τ / μ(B)⌋ + 1`.
    pub fn poisson_horizon(&self) -> usize {
        (self.tau / self.mass).floor() as usize + 1
    }
}

/// Solves `n μ(B(x₀, r)) = τ` for `r` by bisection.
pub fn calibrate_threshold(estimator: &MeasureEstimator, center: &[f64], n: usize, tau: f64) -> Result<ThresholdPlan> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let target = tau / n as f64;
    let reachable = estimator.total_mass();
    if target >= reachable {
        return Err(Error::Unreachable { target, reachable });
    }
    let mut hi = 1e-3;
    while estimator.ball_mass(center, hi)? < target {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::Unreachable { target, reachable });
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let m = estimator.ball_mass(center, mid)?;
        if (m - target).abs() <= 1e-12 * target {
            lo = mid;
            hi = mid;
            break;
        }
        if m < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let radius = 0.5 * (lo + hi);
    let mass = estimator.ball_mass(center, radius)?;
    let plan = ThresholdPlan { tau, center: center.to_vec(), n, radius, level: -radius.ln(), mass };
    if plan.calibration_error() > CALIBRATION_TOL {
        return Err(Error::InvalidArgument(format!(
            "calibration stalled at relative error {:e}",
            plan.calibration_error()
        )));
    }
    Ok(plan)
}

/// Runs `trials` independent trials, trial `i` on stream `(seed, i)`.
pub(crate) fn run_trials<T, F>(trials: usize, seed: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&mut StreamRng) -> Result<T> + Sync,
{
    (0..trials as u64)
        .into_par_iter()
        .map(|i| f(&mut rng::stream(seed, i)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvlEstimate {
    pub p_hat: f64,
    /// Binomial standard error `sqrt(p (1 - p) / trials)`.
    pub stderr: f64,
    pub trials: usize,
    pub survivors: usize,
}

impl EvlEstimate {
    fn from_counts(survivors: usize, trials: usize) -> Self {
        let p = survivors as f64 / trials as f64;
        Self { p_hat: p, stderr: (p * (1.0 - p) / trials as f64).sqrt(), trials, survivors }
    }
}

/// Minimum trial count for Monte Carlo estimates.
pub const MIN_TRIALS: usize = 1000;

/// Fraction of stationary-started trajectories whose samples at
/// `t_0, ..., t_{n-1}` all avoid `B(x₀, r_n)`. Uses `sampling.trajectories`
/// trials; `sampling.n` must equal `plan.n`.
pub fn evl_estimate(model: &DriftModel, plan: &ThresholdPlan, sampling: &SamplingPlan) -> Result<EvlEstimate> {
    if sampling.n != plan.n {
        return Err(Error::InvalidArgument(format!(
            "sampling plan has n = {} but the threshold was calibrated for n = {}",
            sampling.n, plan.n
        )));
    }
    if sampling.trajectories < MIN_TRIALS {
        return Err(Error::InvalidArgument(format!("need at least {MIN_TRIALS} trials, got {}", sampling.trajectories)));
    }
    if plan.center.len() != model.dim() {
        return Err(Error::InvalidArgument("hole centre has the wrong dimension".into()));
    }
    let stepper = Stepper::new(model, sampling.h, sampling)?;
    let survived = run_trials(sampling.trajectories, sampling.seed, |rng| {
        let mut x = draw_stationary(model, rng)?;
        let mut scratch = vec![0.0; x.len()];
        for k in 0..plan.n {
            if k > 0 {
                stepper.advance(&mut x, k - 1, &mut scratch, rng)?;
            }
            if dist(&x, &plan.center) < plan.radius {
                return Ok(false);
            }
        }
        Ok(true)
    })?;
    Ok(EvlEstimate::from_counts(survived.iter().filter(|s| **s).count(), sampling.trajectories))
}

/// Histogram of visit counts `S_{n,τ}` over trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitCountHistogram {
    pub tau: f64,
    /// `counts[k]` trials with exactly `k` visits.
    pub counts: Vec<u64>,
    pub trials: u64,
}

impl VisitCountHistogram {
    pub fn from_visits(tau: f64, visits: &[u64]) -> Self {
        let k_max = visits.iter().copied().max().unwrap_or(0) as usize;
        let mut counts = vec![0u64; k_max + 1];
        for &v in visits {
            counts[v as usize] += 1;
        }
        Self { tau, counts, trials: visits.len() as u64 }
    }

    /// Associative merge of two histograms for the same `τ`.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.tau != other.tau {
            return Err(Error::InvalidArgument("cannot merge histograms for different tau".into()));
        }
        let len = self.counts.len().max(other.counts.len());
        let counts = (0..len)
            .map(|k| self.counts.get(k).copied().unwrap_or(0) + other.counts.get(k).copied().unwrap_or(0))
            .collect();
        Ok(Self { tau: self.tau, counts, trials: self.trials + other.trials })
    }

    pub fn frequency(&self, k: usize) -> f64 {
        self.counts.get(k).copied().unwrap_or(0) as f64 / self.trials as f64
    }

    pub fn mean(&self) -> f64 {
        self.counts.iter().enumerate().map(|(k, c)| k as f64 * *c as f64).sum::<f64>() / self.trials as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let n = self.trials as f64;
        self.counts.iter().enumerate().map(|(k, c)| (k as f64 - m).powi(2) * *c as f64).sum::<f64>() / (n - 1.0)
    }

    pub fn mean_stderr(&self) -> f64 {
        (self.variance() / self.trials as f64).sqrt()
    }
}

/// Counts visits to `B(x₀, r_n)` among samples `0..=⌊τ/μ(B)⌋` of each
/// stationary-started trajectory. `sampling.n` is not used.
pub fn poisson_counts(model: &DriftModel, plan: &ThresholdPlan, sampling: &SamplingPlan) -> Result<VisitCountHistogram> {
    if sampling.trajectories < MIN_TRIALS {
        return Err(Error::InvalidArgument(format!("need at least {MIN_TRIALS} trials, got {}", sampling.trajectories)));
    }
    if plan.center.len() != model.dim() {
        return Err(Error::InvalidArgument("hole centre has the wrong dimension".into()));
    }
    let horizon = plan.poisson_horizon();
    let stepper = Stepper::new(model, sampling.h, sampling)?;
    let visits = run_trials(sampling.trajectories, sampling.seed, |rng| {
        let mut x = draw_stationary(model, rng)?;
        let mut scratch = vec![0.0; x.len()];
        let mut count = 0u64;
        for k in 0..horizon {
            if k > 0 {
                stepper.advance(&mut x, k - 1, &mut scratch, rng)?;
            }
            if dist(&x, &plan.center) < plan.radius {
                count += 1;
            }
        }
        Ok(count)
    })?;
    Ok(VisitCountHistogram::from_visits(plan.tau, &visits))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofResult {
    pub chi2: f64,
    pub dof: usize,
    pub p_value: f64,
    /// Merged bins as `(first k, observed, expected)`; the last bin is the tail.
    pub bins: Vec<(usize, u64, f64)>,
}

/// Minimum expected count per merged bin.
pub const MIN_EXPECTED: f64 = 5.0;

/// Pearson chi-square against `Poisson(τ)`, merging neighbouring counts
/// (and the upper tail) until every bin expects at least five trials.
pub fn poisson_gof(hist: &VisitCountHistogram) -> Result<GofResult> {
    if hist.trials == 0 {
        return Err(Error::InsufficientData("empty histogram".into()));
    }
    let pois = Poisson::new(hist.tau).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let n = hist.trials as f64;
    let mut bins: Vec<(usize, u64, f64)> = Vec::new();
    let (mut start, mut obs, mut exp) = (0usize, 0u64, 0.0f64);
    let mut k = 0usize;
    loop {
        // remaining tail mass from k on
        let tail = if k == 0 { 1.0 } else { pois.sf(k as u64 - 1) };
        if n * tail < MIN_EXPECTED || (k >= hist.counts.len() && n * tail < 2.0 * MIN_EXPECTED) {
            let tail_obs: u64 = hist.counts.iter().skip(k).sum();
            obs += tail_obs;
            exp += n * tail;
            break;
        }
        obs += hist.counts.get(k).copied().unwrap_or(0);
        exp += n * pois.pmf(k as u64);
        k += 1;
        if exp >= MIN_EXPECTED {
            bins.push((start, obs, exp));
            start = k;
            obs = 0;
            exp = 0.0;
        }
    }
    // leftover tail: its own bin if large enough, else merged into the last one
    if exp >= MIN_EXPECTED || bins.is_empty() {
        bins.push((start, obs, exp));
    } else if let Some(last) = bins.last_mut() {
        last.1 += obs;
        last.2 += exp;
    }
    if bins.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} trials give fewer than two bins with expected count >= {MIN_EXPECTED}",
            hist.trials
        )));
    }
    let chi2: f64 = bins.iter().map(|(_, o, e)| (*o as f64 - e).powi(2) / e).sum();
    let dof = bins.len() - 1;
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(GofResult { chi2, dof, p_value: dist.sf(chi2), bins })
}
