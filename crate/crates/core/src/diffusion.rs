//! Noise schedules, the forward (noising) process and the DDIM sampler.
//!
//! Timesteps are 1-based: `t` in `1..=T` indexes `betas[t - 1]`, and
//! `alpha_bar(0) == 1` so that a final step to `t_prev = 0` lands on the
//! predicted clean latent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Serializable description of a schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
    #[serde(default = "default_kind")]
    pub kind: ScheduleKind,
}

fn default_steps() -> usize {
    1000
}
fn default_beta_start() -> f64 {
    1e-4
}
fn default_beta_end() -> f64 {
    0.02
}
fn default_kind() -> ScheduleKind {
    ScheduleKind::Linear
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            beta_start: default_beta_start(),
            beta_end: default_beta_end(),
            kind: default_kind(),
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::new(self.steps, self.beta_start, self.beta_end, self.kind)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Builds a `T`-step schedule.
    ///
    /// `Linear` spaces betas evenly from `beta_start` to `beta_end`. `Cosine`
    /// derives betas from the squared-cosine cumulative curve and clamps them
    /// into `[beta_start, beta_end]`.
    pub fn new(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(invalid!("schedule needs at least one step"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid!("beta bounds must satisfy 0 < {beta_start} <= {beta_end} < 1"));
        }
        let betas = match kind {
            ScheduleKind::Linear if steps == 1 => vec![beta_start],
            ScheduleKind::Linear => (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect(),
            ScheduleKind::Cosine => {
                const S: f64 = 0.008;
                let f = |t: f64| ((t / steps as f64 + S) / (1.0 + S) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                (1..=steps)
                    .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(beta_start, beta_end))
                    .collect()
            }
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(invalid!("empty beta list"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(invalid!("beta {b} outside (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(invalid!("timestep {t} outside [1, {}]", self.num_steps()));
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alphas[t - 1])
    }

    /// Cumulative product up to `t`, with `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_t(t)?;
        Ok(self.alpha_bars[t - 1])
    }
}

fn axpby(a: f64, x: &Tensor, b: f64, y: &Tensor) -> Result<Tensor> {
    x.zip_map(y, |x, y| a * x + b * y)
}

/// One noising step: `sqrt(a_t) z_{t-1} + sqrt(1 - a_t) eps`.
pub fn forward_step(z_prev: &Tensor, t: usize, schedule: &DiffusionSchedule, noise: &Tensor) -> Result<Tensor> {
    let a = schedule.alpha(t)?;
    axpby(a.sqrt(), z_prev, (1.0 - a).sqrt(), noise)
}

/// [`forward_step`] with an explicit `alpha_t` (allows the `alpha_t = 1` limit).
pub fn forward_step_with_alpha(z_prev: &Tensor, alpha: f64, noise: &Tensor) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid!("alpha {alpha} outside [0, 1]"));
    }
    axpby(alpha.sqrt(), z_prev, (1.0 - alpha).sqrt(), noise)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisySample {
    pub latent: Tensor,
    pub timestep: usize,
    pub noise: Tensor,
}

/// Closed-form marginal: `sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn q_sample(z0: &Tensor, t: usize, schedule: &DiffusionSchedule, noise: &Tensor) -> Result<NoisySample> {
    let ab = schedule.alpha_bar(t)?;
    if t == 0 {
        return Err(invalid!("q_sample needs t >= 1"));
    }
    Ok(NoisySample {
        latent: axpby(ab.sqrt(), z0, (1.0 - ab).sqrt(), noise)?,
        timestep: t,
        noise: noise.clone(),
    })
}

/// Standard deviation of the stochastic term of a DDIM update.
pub fn ddim_sigma(schedule: &DiffusionSchedule, t: usize, t_prev: usize, eta: f64) -> Result<f64> {
    let (ab, ab_prev) = (schedule.alpha_bar(t)?, schedule.alpha_bar(t_prev)?);
    Ok(eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt())
}

/// Clean-latent estimate `(z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)`.
pub fn predict_z0(z_t: &Tensor, eps_hat: &Tensor, t: usize, schedule: &DiffusionSchedule) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t)?;
    z_t.zip_map(eps_hat, |z, e| (z - (1.0 - ab).sqrt() * e) / ab.sqrt())
}

/// One DDIM update from `t` to `t_prev < t`.
pub fn ddim_step(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    schedule: &DiffusionSchedule,
    eta: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    if t_prev >= t {
        return Err(invalid!("ddim_step needs t_prev < t, got {t_prev} >= {t}"));
    }
    if !(eta >= 0.0) {
        return Err(invalid!("eta must be non-negative, got {eta}"));
    }
    if eta > 0.0 && noise.is_none() {
        return Err(invalid!("eta > 0 requires a noise tensor"));
    }
    let ab_prev = schedule.alpha_bar(t_prev)?;
    let z0_hat = predict_z0(z_t, eps_hat, t, schedule)?;
    let sigma = ddim_sigma(schedule, t, t_prev, eta)?;
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut out = axpby(ab_prev.sqrt(), &z0_hat, dir, eps_hat)?;
    if let (Some(n), true) = (noise, sigma > 0.0) {
        out = axpby(1.0, &out, sigma, n)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_sampler_steps")]
    pub num_steps: usize,
    #[serde(default)]
    pub eta: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_sampler_steps() -> usize {
    10
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: default_sampler_steps(),
            eta: 0.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &DiffusionSchedule) -> Result<()> {
        if self.num_steps == 0 || self.num_steps > schedule.num_steps() {
            return Err(invalid!("sampler steps {} outside [1, {}]", self.num_steps, schedule.num_steps()));
        }
        if !(self.eta >= 0.0) {
            return Err(invalid!("eta must be non-negative, got {}", self.eta));
        }
        Ok(())
    }
}

/// Descending timesteps with a uniform stride, ending at `t = 1`.
///
/// The sampler follows the last entry with a projection to `t_prev = 0`.
pub fn sampling_timesteps(total: usize, num_steps: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = (0..num_steps).map(|i| 1 + i * total / num_steps).collect();
    ts.reverse();
    ts
}

/// Runs DDIM from seeded Gaussian noise of `shape`.
///
/// `denoiser(z_t, condition, t)` returns the predicted noise. With `eta == 0`
/// the result is a pure function of the seed, condition and denoiser.
pub fn sample<C: ?Sized>(
    mut denoiser: impl FnMut(&Tensor, &C, usize) -> Result<Tensor>,
    condition: &C,
    shape: &[usize],
    schedule: &DiffusionSchedule,
    config: &SamplerConfig,
) -> Result<Tensor> {
    config.validate(schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut z = Tensor::randn(shape.to_vec(), &mut rng);
    let ts = sampling_timesteps(schedule.num_steps(), config.num_steps);
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = denoiser(&z, condition, t)?;
        if eps.shape() != z.shape() {
            return Err(invalid!("denoiser returned {:?} for latent {:?}", eps.shape(), z.shape()));
        }
        let noise = (config.eta > 0.0).then(|| Tensor::randn(shape.to_vec(), &mut rng));
        z = ddim_step(&z, &eps, t, t_prev, schedule, config.eta, noise.as_ref())?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_schedules() {
        let s = DiffusionSchedule::from_betas(vec![0.1]).unwrap();
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
        let s = DiffusionSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert!((s.alpha_bars()[1] - 0.72).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    }

    #[test]
    fn linear_endpoints_and_invariants() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = DiffusionSchedule::new(1000, 1e-4, 0.02, kind).unwrap();
            if kind == ScheduleKind::Linear {
                assert_eq!(s.betas()[0], 1e-4);
                assert_eq!(s.betas()[999], 0.02);
            }
            for (b, a) in s.betas().iter().zip(s.alphas()) {
                assert!(*b > 0.0 && *b < 1.0);
                assert_eq!(*a, 1.0 - b);
            }
            for w in s.alpha_bars().windows(2) {
                assert!(w[1] < w[0] && w[1] > 0.0);
            }
        }
    }

    #[test]
    fn bad_bounds_rejected() {
        assert!(DiffusionSchedule::new(10, 0.0, 0.02, ScheduleKind::Linear).is_err());
        assert!(DiffusionSchedule::new(10, 0.03, 0.02, ScheduleKind::Linear).is_err());
        assert!(DiffusionSchedule::new(10, 0.01, 1.0, ScheduleKind::Linear).is_err());
        assert!(DiffusionSchedule::new(0, 0.01, 0.02, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn forward_step_limits() {
        let z = Tensor::from_fn([4], |i| i as f64);
        let n = Tensor::full([4], 0.5);
        assert_eq!(forward_step_with_alpha(&z, 1.0, &n).unwrap(), z);
        let s = DiffusionSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        let out = forward_step(&Tensor::zeros([4]), 2, &s, &n).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.2f64.sqrt() * 0.5).abs() < 1e-15));
        assert!(forward_step(&z, 1, &s, &Tensor::zeros([3])).is_err());
    }

    #[test]
    fn q_sample_zero_signal() {
        let s = DiffusionSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        let n = Tensor::from_fn([3], |i| i as f64 - 1.0);
        let q = q_sample(&Tensor::zeros([3]), 2, &s, &n).unwrap();
        for (a, b) in q.latent.data().iter().zip(n.data()) {
            assert!((a - 0.28f64.sqrt() * b).abs() < 1e-15);
        }
    }

    #[test]
    fn ddim_algebraic_cases() {
        let s = DiffusionSchedule::new(50, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let z = Tensor::from_fn([5], |i| 0.3 * i as f64 - 0.7);
        let out = ddim_step(&z, &Tensor::zeros([5]), 30, 20, &s, 0.0, None).unwrap();
        let ratio = (s.alpha_bar(20).unwrap() / s.alpha_bar(30).unwrap()).sqrt();
        for (o, zi) in out.data().iter().zip(z.data()) {
            assert!((o - zi * ratio).abs() < 1e-12);
        }
        let eps = Tensor::from_fn([5], |i| (i as f64).sin());
        let ab = s.alpha_bar(30).unwrap();
        let z0 = z.zip_map(&eps, |z, e| (z - (1.0 - ab).sqrt() * e) / ab.sqrt()).unwrap();
        let out = ddim_step(&z, &eps, 30, 0, &s, 0.0, None).unwrap();
        assert_eq!(out, predict_z0(&z, &eps, 30, &s).unwrap());
        assert!(out.max_abs_diff(&z0).unwrap() < 1e-12);
        assert!(ddim_step(&z, &eps, 3, 3, &s, 0.0, None).is_err());
        assert!(ddim_step(&z, &eps, 3, 1, &s, 0.5, None).is_err());
    }

    #[test]
    fn timestep_spacing() {
        assert_eq!(sampling_timesteps(1000, 10), [901, 801, 701, 601, 501, 401, 301, 201, 101, 1]);
        assert_eq!(sampling_timesteps(4, 4), [4, 3, 2, 1]);
    }
}
