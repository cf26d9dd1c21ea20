//! Ancestral sampler, kept as a smoke test for the reverse process. The model
//! is used downstream purely as a feature extractor, so generation quality is
//! out of scope; this only verifies the trained chain runs and stays finite.

use crate::autodiff::Arr;
use crate::diffusion::{NoiseSchedule, UNet};
use crate::error::Result;
use crate::nn::ParamSet;
use crate::util;

/// Draw one unconditional sample of the given shape.
pub fn sample_unconditional(
    unet: &UNet,
    params: &ParamSet,
    sched: &NoiseSchedule,
    shape: &[usize],
    seed: u64,
) -> Result<Arr> {
    let mut rng = util::stream(seed, "ancestral");
    let mut x = Arr::zeros(ndarray::IxDyn(shape));
    util::fill_standard_normal(&mut rng, x.as_slice_mut().unwrap());
    for t in (0..sched.len()).rev() {
        let beta = sched.beta[t];
        let alpha = 1.0 - beta;
        let ab = sched.alpha_bar[t];
        let eps_hat = unet.predict_noise(params, &x, t)?;
        let coef = beta / (1.0 - ab).sqrt();
        x.zip_mut_with(&eps_hat, |xv, &ev| *xv = (*xv - coef * ev) / alpha.sqrt());
        if t > 0 {
            let sigma = beta.sqrt();
            for v in x.iter_mut() {
                *v += sigma * util::standard_normal(&mut rng);
            }
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_schedule, DenoiserConfig};

    #[test]
    fn sampler_runs_and_stays_finite() {
        let unet = UNet::new(DenoiserConfig::tiny()).unwrap();
        let params = unet.init(2);
        let sched = build_schedule(10, 1e-3, 0.05).unwrap();
        let x = sample_unconditional(&unet, &params, &sched, &[1, 4, 4, 4], 3).unwrap();
        assert_eq!(x.shape(), &[1, 4, 4, 4]);
        assert!(x.iter().all(|v| v.is_finite()));
    }
}
