//! Intermediate-feature extraction from a frozen denoiser at a chosen
//! diffusion timestep and bottleneck sub-block, with an on-disk cache.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Arr, Tape};
use crate::dataset::Dataset;
use crate::diffusion::unet::ForwardScope;
use crate::diffusion::{forward_noise, MidBlock, NoiseSchedule, UNet};
use crate::error::{Error, Result};
use crate::exec;
use crate::nn::ParamSet;
use crate::util;
use crate::volume::{Orientation, VolumeTensor};

/// Timesteps evaluated by default when the schedule is long enough.
pub const DEFAULT_TIMESTEP_GRID: [usize; 8] = [10, 30, 50, 100, 150, 200, 300, 500];

/// A (timestep, bottleneck block) feature address.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TapPoint {
    pub timestep: usize,
    pub block: MidBlock,
}

impl TapPoint {
    pub fn new(timestep: usize, block: MidBlock) -> TapPoint {
        TapPoint { timestep, block }
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.timestep >= sched.len() {
            return Err(Error::Validation(format!(
                "tap timestep {} is outside the schedule (T = {})",
                self.timestep,
                sched.len()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for TapPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}-{}", self.timestep, self.block)
    }
}

/// Activation tensor tapped from the denoiser bottleneck.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub data: Arr,
    pub tap: TapPoint,
    pub orientation: Orientation,
    pub scan_id: String,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn n_positions(&self) -> usize {
        self.data.shape()[1..].iter().product()
    }
}

/// Deterministic per-(scan, timestep) noise stream.
fn tap_noise(noise_seed: u64, scan_id: &str, timestep: usize, shape: &[usize]) -> Arr {
    let mut rng = util::stream(noise_seed, &format!("tap-eps/{scan_id}/t{timestep}"));
    let mut eps = Arr::zeros(ndarray::IxDyn(shape));
    util::fill_standard_normal(&mut rng, eps.as_slice_mut().unwrap());
    eps
}

/// Noise a preprocessed volume to the tap timestep, run the denoiser through
/// the tap block, and return the activation. Bit-identical for identical
/// `(params, volume, tap, noise_seed)`.
pub fn extract_features(
    unet: &UNet,
    params: &ParamSet,
    x0: &VolumeTensor,
    tap: TapPoint,
    sched: &NoiseSchedule,
    noise_seed: u64,
) -> Result<FeatureMap> {
    tap.validate(sched)?;
    let eps = tap_noise(noise_seed, &x0.scan_id, tap.timestep, x0.data.shape());
    let x_t = forward_noise(&x0.data, tap.timestep, &eps, sched)?;
    let mut tape = Tape::eval_only();
    let binding = params.bind(&mut tape);
    let xv = tape.leaf(x_t);
    let out = unet.forward(&mut tape, &binding, xv, tap.timestep, ForwardScope::ThroughTap(tap.block));
    Ok(FeatureMap {
        data: tape.value(out.tap(tap.block)).clone(),
        tap,
        orientation: x0.orientation,
        scan_id: x0.scan_id.clone(),
    })
}

// ---- feature cache ----

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FeatureSidecar {
    shape: Vec<usize>,
    timestep: usize,
    block: MidBlock,
    orientation: Orientation,
    scan_id: String,
    checkpoint: String,
    noise_seed: u64,
}

/// Disk cache keyed by (checkpoint hash, scan, tap, noise seed).
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: &Path) -> FeatureCache {
        FeatureCache { dir: dir.to_path_buf() }
    }

    fn stem(&self, ckpt_hash: &str, scan_id: &str, tap: TapPoint, noise_seed: u64) -> PathBuf {
        self.dir
            .join(ckpt_hash)
            .join(format!("{scan_id}-t{}-{}-s{noise_seed}", tap.timestep, tap.block))
    }

    pub fn load(&self, ckpt_hash: &str, scan_id: &str, tap: TapPoint, noise_seed: u64) -> Option<FeatureMap> {
        let stem = self.stem(ckpt_hash, scan_id, tap, noise_seed);
        let sidecar: FeatureSidecar = serde_json::from_slice(&fs::read(stem.with_extension("json")).ok()?).ok()?;
        let data = crate::volume::read_f32_raw(&stem.with_extension("f32"), &sidecar.shape).ok()?;
        Some(FeatureMap {
            data,
            tap: TapPoint::new(sidecar.timestep, sidecar.block),
            orientation: sidecar.orientation,
            scan_id: sidecar.scan_id,
        })
    }

    pub fn store(&self, ckpt_hash: &str, noise_seed: u64, fm: &FeatureMap) -> Result<()> {
        let stem = self.stem(ckpt_hash, &fm.scan_id, fm.tap, noise_seed);
        fs::create_dir_all(stem.parent().unwrap())?;
        crate::volume::write_f32_raw(&stem.with_extension("f32"), &fm.data)?;
        let sidecar = FeatureSidecar {
            shape: fm.data.shape().to_vec(),
            timestep: fm.tap.timestep,
            block: fm.tap.block,
            orientation: fm.orientation,
            scan_id: fm.scan_id.clone(),
            checkpoint: ckpt_hash.to_string(),
            noise_seed,
        };
        fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }
}

/// Extract features for many scans in parallel, going through the cache when
/// one is supplied. Results are in input order.
#[allow(clippy::too_many_arguments)]
pub fn extract_batch(
    unet: &UNet,
    params: &ParamSet,
    ckpt_hash: &str,
    dataset: &Dataset,
    refs: &[(String, String)],
    tap: TapPoint,
    sched: &NoiseSchedule,
    noise_seed: u64,
    cache: Option<&FeatureCache>,
) -> Result<Vec<FeatureMap>> {
    let maps = exec::map(refs, |(pid, scan)| -> Result<FeatureMap> {
        if let Some(cache) = cache {
            if let Some(hit) = cache.load(ckpt_hash, scan, tap, noise_seed) {
                // Cached features are f32-rounded; recomputed ones are not.
                // Round-tripping the cache on first write keeps both paths
                // byte-identical, so a hit is always valid.
                return Ok(hit);
            }
        }
        let volume = dataset.load_volume(pid, scan)?;
        let fm = extract_features(unet, params, &volume, tap, sched, noise_seed)?;
        if let Some(cache) = cache {
            cache.store(ckpt_hash, noise_seed, &fm)?;
            if let Some(hit) = cache.load(ckpt_hash, scan, tap, noise_seed) {
                return Ok(hit);
            }
        }
        Ok(fm)
    });
    maps.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_schedule, DenoiserConfig};
    use crate::volume::Resolution;
    use ndarray::IxDyn;

    fn test_volume(seed: u64) -> VolumeTensor {
        let mut rng = util::stream(seed, "feat-vol");
        let mut data = Arr::zeros(IxDyn(&[1, 4, 4, 4]));
        for v in data.iter_mut() {
            *v = rng.random::<f64>() * 2.0 - 1.0;
        }
        VolumeTensor {
            data,
            orientation: Orientation::Axial,
            study_id: "p".into(),
            scan_id: "p-ax-0".into(),
        }
    }

    use rand::Rng;

    #[test]
    fn extraction_is_bit_deterministic_and_seed_sensitive() {
        let unet = UNet::new(DenoiserConfig::tiny()).unwrap();
        let params = unet.init(1);
        let sched = build_schedule(50, 1e-4, 0.02).unwrap();
        let v = test_volume(2);
        let tap = TapPoint::new(10, MidBlock::Mid2);
        let a = extract_features(&unet, &params, &v, tap, &sched, 7).unwrap();
        let b = extract_features(&unet, &params, &v, tap, &sched, 7).unwrap();
        assert_eq!(a.data, b.data);
        let c = extract_features(&unet, &params, &v, tap, &sched, 8).unwrap();
        assert_ne!(a.data, c.data, "different noise seed must change features");
    }

    #[test]
    fn extraction_does_not_mutate_params() {
        let unet = UNet::new(DenoiserConfig::tiny()).unwrap();
        let params = unet.init(3);
        let before = params.checksum();
        let sched = build_schedule(50, 1e-4, 0.02).unwrap();
        let _ = extract_features(&unet, &params, &test_volume(4), TapPoint::new(5, MidBlock::Mid1), &sched, 0).unwrap();
        assert_eq!(params.checksum(), before);
    }

    #[test]
    fn desk_profile_tap_shape() {
        let cfg = DenoiserConfig::desk();
        let unet = UNet::new(cfg).unwrap();
        let params = unet.init(0);
        let sched = build_schedule(200, 1e-4, 0.02).unwrap();
        let mut rng = util::stream(5, "desk-vol");
        let mut data = Arr::zeros(IxDyn(&[1, 8, 32, 32]));
        for v in data.iter_mut() {
            *v = rng.random::<f64>() * 2.0 - 1.0;
        }
        let v = VolumeTensor { data, orientation: Orientation::Sagittal, study_id: "p".into(), scan_id: "p-sag-0".into() };
        let fm = extract_features(&unet, &params, &v, TapPoint::new(50, MidBlock::Mid0), &sched, 1).unwrap();
        // base 16 x last multiplier 2 channels; two downsampling steps.
        assert_eq!(fm.data.shape(), &[32, 2, 8, 8]);
        let _ = Resolution::new(2, 8, 8);
    }

    #[test]
    fn tap_beyond_schedule_is_rejected() {
        let sched = build_schedule(50, 1e-4, 0.02).unwrap();
        assert!(TapPoint::new(50, MidBlock::Mid0).validate(&sched).is_err());
        assert!(TapPoint::new(49, MidBlock::Mid0).validate(&sched).is_ok());
    }

    #[test]
    fn taps_are_pairwise_distinct_once_stabilisers_move() {
        let unet = UNet::new(DenoiserConfig::tiny()).unwrap();
        let mut params = unet.init(6);
        // Perturb the zero-initialised stabiliser weights as training would.
        let mut rng = util::stream(7, "tap-perturb");
        let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
        for name in names {
            let mut v = params.get(&name).clone();
            for x in v.iter_mut() {
                *x += 0.05 * util::standard_normal(&mut rng);
            }
            params.set(&name, v);
        }
        let sched = build_schedule(50, 1e-4, 0.02).unwrap();
        let v = test_volume(8);
        let maps: Vec<FeatureMap> = MidBlock::ALL
            .iter()
            .map(|b| extract_features(&unet, &params, &v, TapPoint::new(10, *b), &sched, 3).unwrap())
            .collect();
        for i in 0..3 {
            for j in i + 1..3 {
                let linf = maps[i]
                    .data
                    .iter()
                    .zip(maps[j].data.iter())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(linf > 0.0, "taps {i} and {j} identical");
            }
        }
    }

    #[test]
    fn cache_round_trip_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path());
        let unet = UNet::new(DenoiserConfig::tiny()).unwrap();
        let params = unet.init(9);
        let sched = build_schedule(50, 1e-4, 0.02).unwrap();
        let v = test_volume(10);
        let tap = TapPoint::new(3, MidBlock::Mid0);
        let fm = extract_features(&unet, &params, &v, tap, &sched, 11).unwrap();
        cache.store("ck", 11, &fm).unwrap();
        let hit = cache.load("ck", &v.scan_id, tap, 11).unwrap();
        assert_eq!(hit.data.shape(), fm.data.shape());
        // Cache stores f32; a second round trip is exact.
        cache.store("ck", 11, &hit).unwrap();
        let hit2 = cache.load("ck", &v.scan_id, tap, 11).unwrap();
        assert_eq!(hit.data, hit2.data);
        assert!(cache.load("other", &v.scan_id, tap, 11).is_none());
    }
}
