use serde::{Deserialize, Serialize};

use crate::body::NUM_JOINTS;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            kind: ScheduleKind::Cosine,
        }
    }
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Noise schedule indexed by step `0..=T`. Step 0 is the clean signal
/// (`a_0 = abar_0 = 1`); noise levels run `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    /// Per-step retention `a_t = 1 - b_t`.
    pub a: Vec<f64>,
    /// Cumulative products of `a`.
    pub abar: Vec<f64>,
    /// Posterior variances `b_t (1 - abar_{t-1}) / (1 - abar_t)`, zero at `t <= 1`.
    pub sigma2: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        let t_max = cfg.steps;
        if t_max == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let betas: Vec<f64> = match cfg.kind {
            ScheduleKind::Cosine => {
                let f = |t: usize| {
                    let x = (t as f64 / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (1..=t_max).map(|t| (1.0 - f(t) / f(t - 1)).min(MAX_BETA)).collect()
            }
            ScheduleKind::Linear => {
                // the usual 1e-4..0.02 range for 1000 steps, rescaled to T
                let scale = 1000.0 / t_max as f64;
                let (lo, hi) = (scale * 1e-4, (scale * 0.02).min(MAX_BETA));
                (1..=t_max)
                    .map(|t| {
                        if t_max == 1 {
                            hi
                        } else {
                            lo + (hi - lo) * (t - 1) as f64 / (t_max - 1) as f64
                        }
                    })
                    .collect()
            }
        };
        Self::from_betas(&betas)
    }

    /// Builds the schedule from `b_1..b_T`, each in `[0, 1)`.
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        let steps = betas.len();
        let mut a = vec![1.0; steps + 1];
        let mut abar = vec![1.0; steps + 1];
        let mut sigma2 = vec![0.0; steps + 1];
        for t in 1..=steps {
            a[t] = 1.0 - betas[t - 1];
            abar[t] = abar[t - 1] * a[t];
            if t > 1 {
                sigma2[t] = betas[t - 1] * (1.0 - abar[t - 1]) / (1.0 - abar[t]);
            }
        }
        Ok(Self { steps, a, abar, sigma2 })
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::TimestepRange { t, max: self.steps });
        }
        Ok(())
    }

    /// Weights of `theta0_hat` and `theta_t` in the posterior mean.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check(t)?;
        if t == 0 {
            return Err(Error::TimestepRange { t, max: self.steps });
        }
        let b = 1.0 - self.a[t];
        let denom = 1.0 - self.abar[t];
        if denom == 0.0 {
            // no noise at all: the posterior is the current state
            return Ok((0.0, 1.0));
        }
        Ok((
            self.abar[t - 1].sqrt() * b / denom,
            self.a[t].sqrt() * (1.0 - self.abar[t - 1]) / denom,
        ))
    }
}

pub const POSE_LEN: usize = NUM_JOINTS * 6;

/// `sqrt(abar_t) theta0 + sqrt(1 - abar_t) noise`.
pub fn forward_noise(theta0: &[f64], t: usize, sched: &NoiseSchedule, noise: &[f64]) -> Result<Vec<f64>> {
    sched.check(t)?;
    if theta0.len() != noise.len() {
        return Err(Error::InvalidArgument(format!(
            "pose has {} values, noise {}",
            theta0.len(),
            noise.len()
        )));
    }
    let (s, n) = (sched.abar[t].sqrt(), (1.0 - sched.abar[t]).sqrt());
    Ok(theta0.iter().zip(noise).map(|(x, e)| s * x + n * e).collect())
}

/// Posterior mean plus `sqrt(sigma2_t) noise`; the `t = 1` step returns the
/// mean without noise.
pub fn posterior_step(theta_t: &[f64], theta0_hat: &[f64], t: usize, sched: &NoiseSchedule, noise: &[f64]) -> Result<Vec<f64>> {
    let mut mu = posterior_mean(theta_t, theta0_hat, t, sched)?;
    if t > 1 {
        if noise.len() != mu.len() {
            return Err(Error::InvalidArgument("noise length mismatch".into()));
        }
        let s = sched.sigma2[t].sqrt();
        for (m, z) in mu.iter_mut().zip(noise) {
            *m += s * z;
        }
    }
    Ok(mu)
}

pub fn posterior_mean(theta_t: &[f64], theta0_hat: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    let (c0, ct) = sched.posterior_coefficients(t)?;
    if theta_t.len() != theta0_hat.len() {
        return Err(Error::InvalidArgument("pose length mismatch".into()));
    }
    Ok(theta0_hat.iter().zip(theta_t).map(|(x0, xt)| c0 * x0 + ct * xt).collect())
}

/// Rows of `full` for visible joints and of `nocond` for hidden ones.
pub fn fuse_classifier_free(full: &[f64], nocond: &[f64], mask: &[bool; NUM_JOINTS]) -> Vec<f64> {
    let mut out = Vec::with_capacity(POSE_LEN);
    for (j, &v) in mask.iter().enumerate() {
        let src = if v { full } else { nocond };
        out.extend_from_slice(&src[j * 6..(j + 1) * 6]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine() -> NoiseSchedule {
        NoiseSchedule::new(&ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn abar_is_running_product_and_decreasing() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            let s = NoiseSchedule::new(&ScheduleConfig { steps: 100, kind }).unwrap();
            let mut prod = 1.0;
            for t in 1..=100 {
                prod *= s.a[t];
                assert_eq!(s.abar[t], prod);
                assert!(s.abar[t] < s.abar[t - 1]);
                assert!(s.a[t] > 0.0 && s.a[t] <= 1.0);
            }
            assert_eq!(s.abar[0], 1.0);
            assert!(s.abar[100] < 0.01, "{kind:?} ends at {}", s.abar[100]);
        }
    }

    #[test]
    fn noise_free_states_map_to_the_previous_scaling() {
        // with theta_t = sqrt(abar_t) x0 the posterior mean is sqrt(abar_{t-1}) x0
        let s = cosine();
        let x: Vec<f64> = (0..POSE_LEN).map(|i| (i as f64 * 0.37).sin()).collect();
        for t in 1..=100 {
            let xt: Vec<f64> = x.iter().map(|v| s.abar[t].sqrt() * v).collect();
            let mu = posterior_mean(&xt, &x, t, &s).unwrap();
            for (a, b) in mu.iter().zip(&x) {
                assert!((a - s.abar[t - 1].sqrt() * b).abs() < 1e-12, "t={t}");
            }
        }
        let flat = NoiseSchedule::from_betas(&[0.0, 0.0]).unwrap();
        assert_eq!(posterior_mean(&x, &x, 2, &flat).unwrap(), x);
    }

    #[test]
    fn final_step_returns_the_clean_estimate() {
        let s = NoiseSchedule::new(&ScheduleConfig {
            steps: 1,
            kind: ScheduleKind::Cosine,
        })
        .unwrap();
        let xt = vec![0.3; POSE_LEN];
        let x0 = vec![-0.7; POSE_LEN];
        let noise = vec![5.0; POSE_LEN];
        assert_eq!(posterior_step(&xt, &x0, 1, &s, &noise).unwrap(), x0);
        assert!(posterior_step(&xt, &x0, 0, &s, &noise).is_err());
    }

    #[test]
    fn forward_noise_limits() {
        let s = cosine();
        let x = vec![0.5; POSE_LEN];
        let e = vec![-1.0; POSE_LEN];
        assert_eq!(forward_noise(&x, 0, &s, &e).unwrap(), x);
        let far = forward_noise(&x, 100, &s, &e).unwrap();
        assert!(far.iter().all(|v| (v + 1.0).abs() < 0.05));
        assert!(matches!(forward_noise(&x, 101, &s, &e), Err(Error::TimestepRange { .. })));
    }

    #[test]
    fn fusion_selects_rows() {
        let full = vec![1.0; POSE_LEN];
        let none = vec![2.0; POSE_LEN];
        assert_eq!(fuse_classifier_free(&full, &none, &[true; NUM_JOINTS]), full);
        assert_eq!(fuse_classifier_free(&full, &none, &[false; NUM_JOINTS]), none);
        let mut mask = [false; NUM_JOINTS];
        mask[3] = true;
        let f = fuse_classifier_free(&full, &none, &mask);
        for j in 0..NUM_JOINTS {
            let want = if j == 3 { 1.0 } else { 2.0 };
            assert!(f[j * 6..j * 6 + 6].iter().all(|&v| v == want));
        }
        assert_eq!(fuse_classifier_free(&f, &none, &mask), f);
    }
}
