//! Two degenerations of the discrete-time law: sampling ever finer in time,
//! and i.i.d. blocks of `M` noisy copies of one sample.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use super::{run_trials, EvlEstimate, ThresholdPlan, MIN_TRIALS};
use crate::error::{Error, Result};
use crate::sde::{dist, draw_stationary, DriftModel, SamplingPlan, Stepper};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineRow {
    pub m: usize,
    pub p_hat: f64,
    pub stderr: f64,
    pub survivors: usize,
    pub trials: usize,
    /// `e^{-τ M}`
    pub target: f64,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// For each `M` in `m_list`, the fraction of trajectories whose samples at
/// step `h / M` over `[0, n h)` all avoid the ball of `plan`.
///
/// The ball is not recalibrated: `n M μ(B) = τ M` is the same radius. One
/// path per trial is simulated at step `h / lcm(M_list)` and subsampled, so
/// the rows are nested events on shared randomness.
pub fn time_refinement_experiment(
    model: &DriftModel,
    plan: &ThresholdPlan,
    sampling: &SamplingPlan,
    m_list: &[usize],
) -> Result<Vec<RefineRow>> {
    if m_list.is_empty() || m_list.contains(&0) {
        return Err(Error::InvalidArgument("M list must be non-empty with entries >= 1".into()));
    }
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
    let lcm = m_list.iter().fold(1usize, |acc, &m| acc / gcd(acc, m) * m);
    let strides: Vec<usize> = m_list.iter().map(|m| lcm / m).collect();
    let stepper = Stepper::new(model, sampling.h / lcm as f64, sampling)?;
    let fine_len = plan.n * lcm;

    let alive = run_trials(sampling.trajectories, sampling.seed, |rng| {
        let mut x = draw_stationary(model, rng)?;
        let mut scratch = vec![0.0; x.len()];
        let mut alive = vec![true; m_list.len()];
        for j in 0..fine_len {
            if j > 0 {
                stepper.advance(&mut x, j - 1, &mut scratch, rng)?;
            }
            if dist(&x, &plan.center) < plan.radius {
                for (a, s) in alive.iter_mut().zip(&strides) {
                    if j % s == 0 {
                        *a = false;
                    }
                }
                if !alive.iter().any(|a| *a) {
                    break;
                }
            }
        }
        Ok(alive)
    })?;

    Ok(m_list
        .iter()
        .enumerate()
        .map(|(idx, &m)| {
            let survivors = alive.iter().filter(|a| a[idx]).count();
            let est = EvlEstimate::from_counts(survivors, sampling.trajectories);
            RefineRow {
                m,
                p_hat: est.p_hat,
                stderr: est.stderr,
                survivors,
                trials: est.trials,
                target: (-plan.tau * m as f64).exp(),
            }
        })
        .collect())
}

/// Law of the within-block perturbation `W`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    /// `W ≡ 0`: every block repeats its base sample.
    Delta,
    /// Uniform on `[-width/2, width/2]`.
    Uniform { width: f64 },
    Gaussian { sigma: f64 },
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Delta => Ok(()),
            Self::Uniform { width: s } | Self::Gaussian { sigma: s } if s > 0.0 && s.is_finite() => Ok(()),
            _ => Err(Error::InvalidArgument(format!("noise scale must be positive: {self:?}"))),
        }
    }

    pub fn is_diffuse(&self) -> bool {
        !matches!(self, Self::Delta)
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::Delta => 0.0,
            Self::Uniform { width } => width * (rng.random::<f64>() - 0.5),
            Self::Gaussian { sigma } => sigma * rng.sample::<f64, _>(StandardNormal),
        }
    }

    /// `ν([a, b])`
    fn interval_mass(&self, a: f64, b: f64) -> f64 {
        match *self {
            Self::Delta => f64::from(a <= 0.0 && 0.0 <= b),
            Self::Uniform { width } => ((b.min(width / 2.0) - a.max(-width / 2.0)) / width).clamp(0.0, 1.0),
            Self::Gaussian { sigma } => normal_interval(a / sigma, b / sigma),
        }
    }
}

/// Standard normal mass of `[a, b]`.
fn normal_interval(a: f64, b: f64) -> f64 {
    let s = std::f64::consts::SQRT_2;
    if a >= 0.0 {
        0.5 * (statrs::function::erf::erfc(a / s) - statrs::function::erf::erfc(b / s))
    } else if b <= 0.0 {
        0.5 * (statrs::function::erf::erfc(-b / s) - statrs::function::erf::erfc(-a / s))
    } else {
        0.5 * (erf(b / s) - erf(a / s))
    }
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Composite Simpson rule with `2 k` panels.
fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, k: usize) -> f64 {
    let n = 2 * k;
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n).map(|i| f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
    (f(a) + f(b) + inner) * h / 3.0
}

const QUAD_PANELS: usize = 20_000;

/// `(μ * ν)(B(0, r))` with `μ = N(0, 1)`: `E_W[Φ(r - W) - Φ(-r - W)]` by
/// quadrature over the law of `W`.
pub fn convolved_ball_mass(noise: &NoiseSpec, r: f64) -> f64 {
    let base = |w: f64| normal_interval(-r - w, r - w);
    match *noise {
        NoiseSpec::Delta => erf(r / std::f64::consts::SQRT_2),
        NoiseSpec::Uniform { width } => simpson(base, -width / 2.0, width / 2.0, QUAD_PANELS) / width,
        NoiseSpec::Gaussian { sigma } => {
            simpson(|w| base(w) * std_normal_pdf(w / sigma) / sigma, -12.0 * sigma, 12.0 * sigma, QUAD_PANELS)
        }
    }
}

/// `(∫ (1 - ν(B - x))^M μ(dx))^n` by quadrature; the per-block miss
/// probability is integrated directly to keep precision.
pub fn block_survival_oracle(m: usize, noise: &NoiseSpec, n: usize, r: f64) -> f64 {
    let hit = match noise {
        NoiseSpec::Delta => erf(r / std::f64::consts::SQRT_2),
        _ => {
            let reach = 12.0 + r + match *noise {
                NoiseSpec::Uniform { width } => width / 2.0,
                NoiseSpec::Gaussian { sigma } => 12.0 * sigma,
                NoiseSpec::Delta => 0.0,
            };
            simpson(
                |x| {
                    let p = noise.interval_mass(-r - x, r - x);
                    // 1 - (1 - p)^M without cancellation
                    -(m as f64 * (-p).ln_1p()).exp_m1() * std_normal_pdf(x)
                },
                -reach,
                reach,
                QUAD_PANELS * 4,
            )
        }
    };
    (n as f64 * (-hit).ln_1p()).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockResult {
    pub m: usize,
    pub noise: NoiseSpec,
    pub n: usize,
    pub tau: f64,
    /// Radius with `n M (μ * ν)(B) = τ`.
    pub radius: f64,
    /// `(μ * ν)(B)`
    pub mass: f64,
    pub p_hat: f64,
    pub stderr: f64,
    pub trials: usize,
    /// `e^{-τ}` for diffuse noise, `e^{-τ/M}` for `W ≡ 0`.
    pub target: f64,
    /// Finite-`n` survival from [`block_survival_oracle`].
    pub oracle: f64,
}

/// Survival of `Y_{(k-1)M+i} = X_k + W_{(k-1)M+i}`, `k = 1..n`, `i = 1..M`,
/// with `X_k` i.i.d. standard normal, outside `B(0, r)` calibrated by
/// `n M (μ * ν)(B) = τ`. Trial `t` draws from stream `(seed, t)`.
pub fn block_sequence_experiment(
    m: usize,
    noise: NoiseSpec,
    n: usize,
    tau: f64,
    trials: usize,
    seed: u64,
) -> Result<BlockResult> {
    noise.validate()?;
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument("block length and block count must be >= 1".into()));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    if trials < MIN_TRIALS {
        return Err(Error::InvalidArgument(format!("need at least {MIN_TRIALS} trials, got {trials}")));
    }
    let total = (n * m) as f64;
    let target_mass = tau / total;
    if target_mass >= 1.0 {
        return Err(Error::Unreachable { target: target_mass, reachable: 1.0 });
    }
    let mass_at = |r: f64| convolved_ball_mass(&noise, r);
    let mut hi = 1e-3;
    while mass_at(hi) < target_mass {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mass_at(mid) < target_mass {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let radius = 0.5 * (lo + hi);
    let mass = mass_at(radius);

    let survived = run_trials(trials, seed, |rng| {
        for _ in 0..n {
            let x: f64 = rng.sample(StandardNormal);
            if !noise.is_diffuse() {
                if x.abs() < radius {
                    return Ok(false);
                }
                continue;
            }
            for _ in 0..m {
                if (x + noise.sample(rng)).abs() < radius {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    })?;
    let est = EvlEstimate::from_counts(survived.iter().filter(|s| **s).count(), trials);
    let target = if noise.is_diffuse() { (-tau).exp() } else { (-tau / m as f64).exp() };
    Ok(BlockResult {
        m,
        noise,
        n,
        tau,
        radius,
        mass,
        p_hat: est.p_hat,
        stderr: est.stderr,
        trials,
        target,
        oracle: block_survival_oracle(m, &noise, n, radius),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evt::{calibrate_threshold, evl_estimate, MeasureEstimator};
    use crate::sde::Scheme;

    #[test]
    fn convolution_matches_closed_forms() {
        // N(0,1) * N(0,σ²) = N(0, 1+σ²)
        for (sigma, r) in [(1.0, 1e-4), (0.5, 0.3), (2.0, 1.0)] {
            let q = convolved_ball_mass(&NoiseSpec::Gaussian { sigma }, r);
            let exact = erf(r / (2.0 * (1.0 + sigma * sigma)).sqrt());
            assert!((q - exact).abs() < 1e-10 * exact, "{sigma} {r}: {q} vs {exact}");
        }
        // tiny ball: mass ≈ 2r times the convolved density at 0
        let w = 2.0;
        let r = 1e-5;
        let density0 = normal_interval(-w / 2.0, w / 2.0) / w;
        let q = convolved_ball_mass(&NoiseSpec::Uniform { width: w }, r);
        assert!((q / (2.0 * r * density0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn oracle_examples() {
        let delta = block_survival_oracle(4, &NoiseSpec::Delta, 2000, 0.01);
        assert!((delta - (1.0 - erf(0.01 / std::f64::consts::SQRT_2)).powi(2000)).abs() < 1e-12);
        // one-sample blocks: ∫ ν(B - x) μ(dx) is the convolved mass itself
        let g = NoiseSpec::Gaussian { sigma: 1.0 };
        let r = 2e-4;
        let one = block_survival_oracle(1, &g, 1000, r);
        let direct = (1.0 - convolved_ball_mass(&g, r)).powi(1000);
        assert!((one - direct).abs() < 1e-9, "{one} vs {direct}");
    }

    #[test]
    fn block_examples() {
        let delta = block_sequence_experiment(4, NoiseSpec::Delta, 2000, 1.0, 20_000, 1).unwrap();
        assert!((delta.target - (-0.25f64).exp()).abs() < 1e-15);
        assert!((delta.p_hat - delta.oracle).abs() < 3.0 * delta.stderr + 0.01, "{delta:?}");
        assert!((delta.p_hat - 0.7788).abs() < 3.0 * delta.stderr + 0.01);

        let gauss = block_sequence_experiment(4, NoiseSpec::Gaussian { sigma: 1.0 }, 2000, 1.0, 20_000, 2).unwrap();
        assert!((gauss.p_hat - gauss.oracle).abs() < 3.0 * gauss.stderr + 0.015, "{gauss:?}");
        assert!((gauss.p_hat - (-1.0f64).exp()).abs() < 3.0 * gauss.stderr + 0.015);

        for noise in [NoiseSpec::Delta, NoiseSpec::Uniform { width: 1.0 }] {
            let one = block_sequence_experiment(1, noise, 1000, 1.0, 5000, 3).unwrap();
            assert!((one.target - (-1.0f64).exp()).abs() < 1e-15);
            assert!((one.p_hat - one.target).abs() < 3.0 * one.stderr + 0.015, "{one:?}");
        }
        assert!(block_sequence_experiment(4, NoiseSpec::Gaussian { sigma: 0.0 }, 10, 1.0, 5000, 0).is_err());
    }

    #[test]
    fn refinement_is_nested_and_reproduces_plain_sampling() {
        let model = DriftModel::ou(1).unwrap();
        let n = 500;
        let plan = calibrate_threshold(&MeasureEstimator::ou_stationary(1), &[0.0], n, 1.0).unwrap();
        let sampling = SamplingPlan::new(0.5, n).with_scheme(Scheme::ExactOu).with_trajectories(5000).with_seed(11);
        let rows = time_refinement_experiment(&model, &plan, &sampling, &[1, 2, 4]).unwrap();
        assert!(rows[0].survivors >= rows[1].survivors && rows[1].survivors >= rows[2].survivors);
        assert!(rows[0].p_hat > rows[1].p_hat && rows[1].p_hat > rows[2].p_hat);
        for row in &rows {
            assert!((row.p_hat - row.target).abs() < 3.0 * row.stderr + 0.015, "{row:?}");
        }
        let plain = evl_estimate(&model, &plan, &sampling).unwrap();
        assert!((rows[0].p_hat - plain.p_hat).abs() < 3.0 * (rows[0].stderr + plain.stderr));
        assert!(time_refinement_experiment(&model, &plan, &sampling, &[0]).is_err());
    }
}
