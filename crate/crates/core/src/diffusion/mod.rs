//! Discrete-time Gaussian diffusion: schedule, closed-form noising, the 3D
//! U-Net denoiser, self-supervised pretraining, and checkpoints.

pub mod checkpoint;
pub mod pretrain;
pub mod sample;
pub mod unet;

use serde::{Deserialize, Serialize};

use crate::autodiff::Arr;
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use pretrain::{pretrain, PretrainConfig};
pub use unet::{DenoiserConfig, MidBlock, UNet};

/// Parameters that define a linear beta schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// Per-timestep noise coefficients: beta and the cumulative signal fraction.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }
}

/// Linear beta spacing; `alpha_bar[t]` is the running product of `1 - beta`.
pub fn build_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::Validation("schedule needs at least one timestep".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Validation(format!(
            "beta endpoints must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let beta: Vec<f64> = if timesteps == 1 {
        vec![beta_start]
    } else {
        (0..timesteps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64)
            .collect()
    };
    let mut alpha_bar = Vec::with_capacity(timesteps);
    let mut prod = 1.0;
    for b in &beta {
        prod *= 1.0 - b;
        alpha_bar.push(prod);
    }
    debug_assert!(alpha_bar.windows(2).all(|w| w[1] < w[0]));
    Ok(NoiseSchedule { beta, alpha_bar })
}

/// Closed-form marginal of the forward process:
/// `x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_noise(x0: &Arr, t: usize, eps: &Arr, sched: &NoiseSchedule) -> Result<Arr> {
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "noise shape {:?} does not match volume {:?}",
            eps.shape(),
            x0.shape()
        )));
    }
    if t >= sched.len() {
        return Err(Error::Validation(format!(
            "timestep {t} out of range for schedule of length {}",
            sched.len()
        )));
    }
    let ab = sched.alpha_bar[t];
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.mapv(|v| v * sa) + &eps.mapv(|v| v * sn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn single_step_schedule_product() {
        let s = build_schedule(1, 0.1, 0.1).unwrap();
        assert_eq!(s.alpha_bar, vec![0.9]);
    }

    #[test]
    fn first_element_of_standard_schedule() {
        // First element of the cumulative product is just 1 - beta_start.
        let s = build_schedule(1000, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar[0] - 0.9999).abs() < 1e-12);
        assert_eq!(s.len(), 1000);
    }

    #[test]
    fn alpha_bar_strictly_decreasing_in_unit_interval() {
        for (t, start, end) in [(1000, 1e-4, 0.02), (200, 1e-4, 0.02), (7, 0.3, 0.6)] {
            let s = build_schedule(t, start, end).unwrap();
            assert!(s.beta.iter().all(|b| *b > 0.0 && *b < 1.0));
            assert!(s.alpha_bar.iter().all(|a| *a > 0.0 && *a < 1.0));
            for w in s.alpha_bar.windows(2) {
                assert!(w[1] < w[0]);
            }
        }
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(build_schedule(0, 0.1, 0.2).is_err());
        assert!(build_schedule(10, 0.0, 0.2).is_err());
        assert!(build_schedule(10, 0.3, 0.2).is_err());
        assert!(build_schedule(10, 0.3, 1.0).is_err());
    }

    #[test]
    fn zero_volume_noising_is_pure_noise_term() {
        let s = build_schedule(100, 1e-4, 0.02).unwrap();
        let x0 = Arr::zeros(IxDyn(&[1, 2, 2, 2]));
        let mut eps = Arr::zeros(IxDyn(&[1, 2, 2, 2]));
        eps.fill(2.0);
        let t = 37;
        let xt = forward_noise(&x0, t, &eps, &s).unwrap();
        let expect = 2.0 * (1.0 - s.alpha_bar[t]).sqrt();
        for v in xt.iter() {
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn near_identity_at_tiny_beta() {
        let s = build_schedule(10, 1e-6, 1e-6).unwrap();
        let x0 = Arr::from_elem(IxDyn(&[1, 2, 2, 2]), 0.5);
        let eps = Arr::from_elem(IxDyn(&[1, 2, 2, 2]), 1.0);
        let xt = forward_noise(&x0, 0, &eps, &s).unwrap();
        for v in xt.iter() {
            assert!((v - 0.5).abs() / 0.5 < 1e-2);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let s = build_schedule(10, 1e-4, 0.02).unwrap();
        let x0 = Arr::zeros(IxDyn(&[1, 2, 2, 2]));
        let eps = Arr::zeros(IxDyn(&[1, 2, 2, 4]));
        assert!(forward_noise(&x0, 0, &eps, &s).is_err());
        assert!(forward_noise(&x0, 10, &x0, &s).is_err());
    }
}
