//! DDPM noise schedule, forward corruption, single reverse step and the
//! closed-form clean-sample estimate.
//!
//! Timesteps are 1-based: `t = 1` is the least noisy step and `t = T` the
//! noisiest. All operations are pure; callers own the random draws.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::plan::PlanTensor;

/// Choice of the reverse-process standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `sigma_t = sqrt(beta_t)`.
    #[default]
    Beta,
    /// `sigma_t^2 = beta_t (1 - abar_{t-1}) / (1 - abar_t)`.
    Posterior,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma: SigmaMode,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sigma: SigmaMode::Beta,
        }
    }
}

impl ScheduleConfig {
    /// Linear schedule over `steps` with the endpoints rescaled by `1000 / steps`
    /// so that short chains still end close to pure noise.
    pub fn scaled(steps: usize) -> Self {
        let scale = 1000.0 / steps as f64;
        Self {
            steps,
            beta_start: 1e-4 * scale,
            beta_end: (0.02 * scale).min(0.999),
            sigma: SigmaMode::Beta,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    config: ScheduleConfig,
}

impl Schedule {
    /// Linear beta schedule from `beta_start` to `beta_end`.
    pub fn linear(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            steps,
            beta_start,
            beta_end,
            ..
        } = config;
        if steps == 0 {
            return Err(Error::InvalidSchedule("step count must be positive".into()));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && (beta_start < beta_end || steps == 1)) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let beta = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::build(beta, config)
    }

    /// Schedule from explicit betas in `[0, 1)`. Monotonicity is not required,
    /// which admits degenerate schedules for testing.
    pub fn from_betas(beta: Vec<f64>, sigma: SigmaMode) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidSchedule("empty beta list".into()));
        }
        if beta.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::InvalidSchedule("betas must lie in [0, 1)".into()));
        }
        let config = ScheduleConfig {
            steps: beta.len(),
            beta_start: beta[0],
            beta_end: *beta.last().unwrap(),
            sigma,
        };
        Self::build(beta, config)
    }

    fn build(beta: Vec<f64>, config: ScheduleConfig) -> Result<Self> {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar: Vec<f64> = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigma = beta
            .iter()
            .enumerate()
            .map(|(i, &b)| match config.sigma {
                SigmaMode::Beta => b.sqrt(),
                SigmaMode::Posterior => {
                    let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                    let denom = 1.0 - alpha_bar[i];
                    if denom <= 0.0 {
                        0.0
                    } else {
                        (b * (1.0 - prev) / denom).sqrt()
                    }
                }
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
            config,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    /// Stable digest of the schedule parameters, stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}", self.config.sigma).as_bytes());
        for b in &self.beta {
            h.update(b.to_le_bytes());
        }
        h.finalize()
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_sample(
    schedule: &Schedule,
    x0: &PlanTensor,
    t: usize,
    eps: &PlanTensor,
) -> Result<PlanTensor> {
    schedule.check(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(eps, |x, e| a * x + b * e))
}

/// One ancestral step:
/// `(xt - (1 - alpha_t) / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t z`.
/// The final step (`t = 1`) must not add noise.
pub fn reverse_step(
    schedule: &Schedule,
    xt: &PlanTensor,
    t: usize,
    eps_hat: &PlanTensor,
    z: &PlanTensor,
) -> Result<PlanTensor> {
    schedule.check(t)?;
    if t == 1 && z.flat().any(|v| v != 0.0) {
        return Err(Error::InvalidRequest(
            "the final reverse step takes no noise".into(),
        ));
    }
    let alpha = schedule.alpha(t);
    let one_minus_ab = 1.0 - schedule.alpha_bar(t);
    let coef = if one_minus_ab > 0.0 {
        (1.0 - alpha) / one_minus_ab.sqrt()
    } else {
        0.0
    };
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let sigma = schedule.sigma(t);
    let mean = xt.zip_map(eps_hat, |x, e| inv_sqrt_alpha * (x - coef * e));
    Ok(mean.zip_map(z, |m, n| m + sigma * n))
}

/// Clean-sample estimate `(xt - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)`.
pub fn estimate_x0(
    schedule: &Schedule,
    xt: &PlanTensor,
    t: usize,
    eps_hat: &PlanTensor,
) -> Result<PlanTensor> {
    schedule.check(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(xt.zip_map(eps_hat, |x, e| (x - b * e) / a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_tensor(rng: &mut ChaCha8Rng) -> PlanTensor {
        let v: Vec<f64> = (0..48).map(|_| StandardNormal.sample(rng)).collect();
        PlanTensor::from_flat(&v)
    }

    #[test]
    fn default_schedule_invariants() {
        let s = Schedule::linear(ScheduleConfig::default()).unwrap();
        assert_eq!(s.steps(), 1000);
        assert!(s.alpha_bar(1) > 0.99);
        for t in 2..=s.steps() {
            assert!(s.beta(t) > s.beta(t - 1));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.beta(1) > 0.0 && s.beta(1000) < 1.0);
    }

    #[test]
    fn scaled_schedule_reaches_noise() {
        let s = Schedule::linear(ScheduleConfig::scaled(100)).unwrap();
        assert!(s.alpha_bar(100) < 1e-3);
        assert!(s.alpha_bar(1) > 0.99);
    }

    #[test]
    fn schedule_rejects_bad_config() {
        let mut c = ScheduleConfig::default();
        c.beta_end = 1.5;
        assert!(Schedule::linear(c).is_err());
        c = ScheduleConfig::default();
        c.steps = 0;
        assert!(Schedule::linear(c).is_err());
    }

    #[test]
    fn posterior_sigma_vanishes_at_first_step() {
        let mut c = ScheduleConfig::default();
        c.sigma = SigmaMode::Posterior;
        let s = Schedule::linear(c).unwrap();
        assert_eq!(s.sigma(1), 0.0);
        assert!(s.sigma(500) < s.beta(500).sqrt());
    }

    #[test]
    fn zero_noise_forward_scales_signal() {
        let s = Schedule::linear(ScheduleConfig::default()).unwrap();
        let x0 = PlanTensor::filled(0.5);
        let out = forward_sample(&s, &x0, 300, &PlanTensor::zeros()).unwrap();
        let expected = s.alpha_bar(300).sqrt() * 0.5;
        assert!(out.flat().all(|v| (v - expected).abs() < 1e-15));
        assert!(forward_sample(&s, &x0, 0, &PlanTensor::zeros()).is_err());
        assert!(forward_sample(&s, &x0, 1001, &PlanTensor::zeros()).is_err());
    }

    #[test]
    fn first_step_barely_perturbs() {
        let s = Schedule::linear(ScheduleConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = PlanTensor::filled(1.0);
        let eps = normal_tensor(&mut rng).clip(-1.0, 1.0);
        let out = forward_sample(&s, &x0, 1, &eps).unwrap();
        let bound = (1.0 - s.alpha_bar(1).sqrt()) + (1.0 - s.alpha_bar(1)).sqrt();
        assert!(bound < 0.0101);
        assert!(out.max_abs_diff(&x0) <= bound + 1e-12);
    }

    #[test]
    fn degenerate_schedule_is_identity() {
        let s = Schedule::from_betas(vec![0.0; 4], SigmaMode::Beta).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = normal_tensor(&mut rng);
        let out = reverse_step(&s, &x, 3, &PlanTensor::zeros(), &normal_tensor(&mut rng)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn single_step_chain_inverts() {
        let s = Schedule::linear(ScheduleConfig {
            steps: 1,
            beta_start: 0.3,
            beta_end: 0.3,
            sigma: SigmaMode::Beta,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = normal_tensor(&mut rng).clip(-1.0, 1.0);
        let eps = normal_tensor(&mut rng);
        let xt = forward_sample(&s, &x0, 1, &eps).unwrap();
        let back = reverse_step(&s, &xt, 1, &eps, &PlanTensor::zeros()).unwrap();
        assert!(back.max_abs_diff(&x0) < 1e-6);
    }

    #[test]
    fn final_step_rejects_noise() {
        let s = Schedule::linear(ScheduleConfig::default()).unwrap();
        let x = PlanTensor::zeros();
        assert!(reverse_step(&s, &x, 1, &x, &PlanTensor::filled(0.1)).is_err());
    }

    #[test]
    fn reverse_step_is_linear_without_noise() {
        let s = Schedule::linear(ScheduleConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = normal_tensor(&mut rng);
        let e = normal_tensor(&mut rng);
        let a = -2.75;
        let z = PlanTensor::zeros();
        let lhs = reverse_step(&s, &x.map(|v| a * v), 400, &e.map(|v| a * v), &z).unwrap();
        let rhs = reverse_step(&s, &x, 400, &e, &z).unwrap().map(|v| a * v);
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn estimate_inverts_forward() {
        let s = Schedule::linear(ScheduleConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for t in [1, 10, 500, 999, 1000] {
            let x0 = normal_tensor(&mut rng).clip(-1.0, 1.0);
            let eps = normal_tensor(&mut rng);
            let xt = forward_sample(&s, &x0, t, &eps).unwrap();
            let back = estimate_x0(&s, &xt, t, &eps).unwrap();
            assert!(back.max_abs_diff(&x0) < 1e-6, "t={t}");
        }
        let xt = PlanTensor::filled(0.3);
        let raw = estimate_x0(&s, &xt, 50, &PlanTensor::zeros()).unwrap();
        assert!(raw.flat().all(|v| (v - 0.3 / s.alpha_bar(50).sqrt()).abs() < 1e-15));
    }

    #[test]
    fn estimate_error_scales_with_noise_ratio() {
        let s = Schedule::linear(ScheduleConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = 500;
        let x0 = normal_tensor(&mut rng).clip(-1.0, 1.0);
        let eps = normal_tensor(&mut rng);
        let xt = forward_sample(&s, &x0, t, &eps).unwrap();
        let delta = 0.01;
        let off = estimate_x0(&s, &xt, t, &eps.map(|v| v + delta)).unwrap();
        let ab = s.alpha_bar(t);
        let expected = delta * (1.0 - ab).sqrt() / ab.sqrt();
        for v in off.zip_map(&x0, |a, b| (a - b).abs()).flat() {
            assert!((v - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn fingerprint_tracks_parameters() {
        let a = Schedule::linear(ScheduleConfig::default()).unwrap();
        let b = Schedule::linear(ScheduleConfig::scaled(100)).unwrap();
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
