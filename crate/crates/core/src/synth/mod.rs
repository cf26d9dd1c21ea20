//! Synthetic multi-plane phantom studies with controllable labels,
//! segmentable structures, and the standard preprocessing chain.

pub mod phantom;

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Arr;
use crate::ehr::{EHRRecord, EventCategory, PatientType, Sex};
use crate::error::{Error, Result};
use crate::util;
use crate::volume::{resize_bilinear_2d, Orientation, Resolution, SegMask, VolumeTensor};

pub use phantom::PhantomModel;

/// Extra margin generated around the target resolution so preprocessing has a
/// real crop-and-resize to do.
const RAW_D_MARGIN: usize = 4;
const RAW_HW_MARGIN: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub n_patients: usize,
    pub resolution: Resolution,
    pub n_labels: usize,
    pub n_structures: usize,
    pub label_effect_strength: f64,
    pub noise_floor: f64,
    /// Fraction of patients that get a second scan in one orientation.
    pub multi_scan_fraction: f64,
    /// Per-label positive rate; 0 forces all labels negative.
    pub label_prevalence: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// Desk-scale default: (8, 32, 32) volumes, 4 labels, 4 structures.
    pub fn desk(n_patients: usize, seed: u64) -> PhantomSpec {
        PhantomSpec {
            n_patients,
            resolution: Resolution::new(8, 32, 32),
            n_labels: 4,
            n_structures: 4,
            label_effect_strength: 0.5,
            noise_floor: 0.03,
            multi_scan_fraction: 0.15,
            label_prevalence: 0.45,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::Validation("phantom needs at least one patient".into()));
        }
        if self.label_effect_strength <= 0.0 {
            return Err(Error::Validation("label_effect_strength must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.multi_scan_fraction) {
            return Err(Error::Validation(format!(
                "multi_scan_fraction must lie in [0, 0.5), got {}",
                self.multi_scan_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.label_prevalence) {
            return Err(Error::Validation("label_prevalence must lie in [0, 1]".into()));
        }
        if self.n_labels == 0 || self.n_structures == 0 {
            return Err(Error::Validation("need at least one label and one structure".into()));
        }
        if self.resolution.d < 2 || self.resolution.h < 4 || self.resolution.w < 4 {
            return Err(Error::Validation("resolution too small".into()));
        }
        Ok(())
    }

    pub fn raw_resolution(&self) -> Resolution {
        Resolution::new(
            self.resolution.d + RAW_D_MARGIN,
            self.resolution.h + RAW_HW_MARGIN,
            self.resolution.w + RAW_HW_MARGIN,
        )
    }
}

/// One patient's study as stored in the dataset index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub patient_id: String,
    /// Scan ids per orientation, in acquisition order.
    pub scans: BTreeMap<Orientation, Vec<String>>,
    /// K-bit multi-label vector.
    pub labels: Vec<u8>,
    pub ehr: Option<EHRRecord>,
    /// Scan ids that carry a segmentation mask.
    pub mask_scan_ids: Vec<String>,
}

impl StudyRecord {
    pub fn scan_ids(&self) -> impl Iterator<Item = &String> {
        self.scans.values().flatten()
    }

    pub fn has_all_orientations(&self) -> bool {
        Orientation::ALL.iter().all(|o| self.scans.get(o).is_some_and(|s| !s.is_empty()))
    }
}

/// A generated study: the index record plus the actual voxel data.
#[derive(Clone, Debug)]
pub struct GeneratedStudy {
    pub record: StudyRecord,
    pub volumes: Vec<VolumeTensor>,
    pub masks: BTreeMap<String, SegMask>,
    pub model: PhantomModel,
}

/// Central-crop the slice axis, resize slices bilinearly, then min-max map to
/// [-1, 1]. A constant input maps to all zeros.
pub fn preprocess_volume(raw: &Arr, profile: Resolution) -> Result<Arr> {
    let s = raw.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::Shape(format!("raw volume must be (1, D, H, W), got {s:?}")));
    }
    let (d_raw, h_raw, w_raw) = (s[1], s[2], s[3]);
    if d_raw < profile.d {
        return Err(Error::Shape(format!(
            "raw depth {d_raw} is smaller than profile depth {}",
            profile.d
        )));
    }
    let offset = (d_raw - profile.d) / 2;
    let mut out = Arr::zeros(IxDyn(&[1, profile.d, profile.h, profile.w]));
    for dz in 0..profile.d {
        let slice = raw
            .index_axis(ndarray::Axis(0), 0)
            .index_axis_move(ndarray::Axis(0), offset + dz)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let resized = if (h_raw, w_raw) == (profile.h, profile.w) {
            slice
        } else {
            resize_bilinear_2d(&slice.view(), profile.h, profile.w)
        };
        out.index_axis_mut(ndarray::Axis(0), 0)
            .index_axis_move(ndarray::Axis(0), dz)
            .assign(&resized);
    }
    let min = out.iter().copied().fold(f64::INFINITY, f64::min);
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range < 1e-12 {
        out.fill(0.0);
    } else {
        out.mapv_inplace(|v| 2.0 * (v - min) / range - 1.0);
    }
    Ok(out)
}

/// Orientations whose scans carry segmentation masks.
pub const MASKED_ORIENTATIONS: [Orientation; 2] = [Orientation::Sagittal, Orientation::Coronal];

/// Deterministically generate one patient's study.
pub fn generate_phantom_study(spec: &PhantomSpec, patient_id: &str) -> Result<GeneratedStudy> {
    spec.validate()?;
    let mut rng = util::stream(spec.seed, &format!("phantom/{patient_id}"));
    let model = PhantomModel::from_stream(spec, &mut rng);

    // Scan multiplicity: a multi-scan patient gets one repeated orientation.
    let is_multi = rng.random::<f64>() < spec.multi_scan_fraction;
    let repeat_orientation = Orientation::ALL[rng.random_range(0..3)];
    let ehr = sample_ehr(&model.labels, &mut rng);

    let mut scans: BTreeMap<Orientation, Vec<String>> = BTreeMap::new();
    let mut volumes = Vec::new();
    let mut masks = BTreeMap::new();
    let mut mask_scan_ids = Vec::new();

    for orientation in Orientation::ALL {
        let count = if is_multi && orientation == repeat_orientation { 2 } else { 1 };
        let mut ids = Vec::with_capacity(count);
        for k in 0..count {
            let scan_id = format!("{patient_id}-{}-{k}", orientation.short());
            let raw = render_raw_scan(spec, &model, orientation, &scan_id);
            let data = preprocess_volume(&raw, spec.resolution)?;
            volumes.push(VolumeTensor {
                data,
                orientation,
                study_id: patient_id.to_string(),
                scan_id: scan_id.clone(),
            });
            if MASKED_ORIENTATIONS.contains(&orientation) {
                masks.insert(scan_id.clone(), render_mask(spec, &model, orientation));
                mask_scan_ids.push(scan_id.clone());
            }
            ids.push(scan_id);
        }
        scans.insert(orientation, ids);
    }

    let record = StudyRecord {
        patient_id: patient_id.to_string(),
        scans,
        labels: model.labels.clone(),
        ehr: Some(ehr),
        mask_scan_ids,
    };
    Ok(GeneratedStudy { record, volumes, masks, model })
}

/// Noise-free anatomy sampled on the raw grid plus per-scan acquisition noise.
fn render_raw_scan(spec: &PhantomSpec, model: &PhantomModel, orientation: Orientation, scan_id: &str) -> Arr {
    let raw = spec.raw_resolution();
    let mut noise_rng = util::stream(spec.seed, &format!("scan-noise/{scan_id}"));
    let mut out = Arr::zeros(IxDyn(&[1, raw.d, raw.h, raw.w]));
    for dz in 0..raw.d {
        let us = phantom::axis_coord(dz, raw.d);
        for hy in 0..raw.h {
            let ur = phantom::axis_coord(hy, raw.h);
            for wx in 0..raw.w {
                let uc = phantom::axis_coord(wx, raw.w);
                let p = phantom::canonical_coords(orientation, us, ur, uc);
                let v = model.intensity(p, orientation, spec.label_effect_strength)
                    + spec.noise_floor * util::standard_normal(&mut noise_rng);
                out[IxDyn(&[0, dz, hy, wx])] = v;
            }
        }
    }
    out
}

/// Canonical coordinates of final-grid voxel (d, h, w) for this spec: the
/// slice axis accounts for the central crop, the in-plane axes for the resize.
pub fn final_grid_coords(spec: &PhantomSpec, orientation: Orientation, d: usize, h: usize, w: usize) -> [f64; 3] {
    let raw = spec.raw_resolution();
    let offset = (raw.d - spec.resolution.d) / 2;
    let us = phantom::axis_coord(d + offset, raw.d);
    let ur = phantom::axis_coord(h, spec.resolution.h);
    let uc = phantom::axis_coord(w, spec.resolution.w);
    phantom::canonical_coords(orientation, us, ur, uc)
}

/// Structure mask on the final grid, aligned with the preprocessed volume.
fn render_mask(spec: &PhantomSpec, model: &PhantomModel, orientation: Orientation) -> SegMask {
    let res = spec.resolution;
    let mut classes = ArrayD::<u8>::zeros(IxDyn(&[res.d, res.h, res.w]));
    for d in 0..res.d {
        for h in 0..res.h {
            for w in 0..res.w {
                let p = final_grid_coords(spec, orientation, d, h, w);
                classes[IxDyn(&[d, h, w])] = model.structure_class(p);
            }
        }
    }
    SegMask { classes }
}

/// Voxel mask (final grid) of lesion `label`'s region in the given plane —
/// the generator-internal region map used by the learnability oracle.
pub fn lesion_region_mask(spec: &PhantomSpec, model: &PhantomModel, orientation: Orientation, label: usize) -> ArrayD<bool> {
    let res = spec.resolution;
    let mut mask = ArrayD::<bool>::from_elem(IxDyn(&[res.d, res.h, res.w]), false);
    for d in 0..res.d {
        for h in 0..res.h {
            for w in 0..res.w {
                let p = final_grid_coords(spec, orientation, d, h, w);
                mask[IxDyn(&[d, h, w])] = model.in_lesion_region(label, p);
            }
        }
    }
    mask
}

fn sample_ehr(labels: &[u8], rng: &mut rand_chacha::ChaCha8Rng) -> EHRRecord {
    let label0 = labels.first().copied().unwrap_or(0) as f64;
    let label1 = labels.get(1).copied().unwrap_or(0);
    let age = 32.0 + 12.0 * util::standard_normal(rng) + 6.0 * label0;
    let height = 170.0 + 8.0 * util::standard_normal(rng);
    let weight = 70.0 + 10.0 * util::standard_normal(rng);
    let sex = if rng.random::<f64>() < 0.5 { Sex::Male } else { Sex::Female };
    let ptype = if rng.random::<f64>() < 0.3 { PatientType::Athlete } else { PatientType::NonAthlete };
    let event = if label1 > 0 && rng.random::<f64>() < 0.6 {
        EventCategory::Sports
    } else {
        match (rng.random::<f64>() * 8.0) as usize {
            0 => EventCategory::Overuse,
            1 => EventCategory::Traffic,
            2 => EventCategory::Duty,
            3 => EventCategory::DailyLife,
            4 => EventCategory::Sports,
            5 => EventCategory::Spontaneous,
            6 => EventCategory::Actor,
            _ => EventCategory::Other,
        }
    };
    // 12% missingness per field keeps the UNK paths exercised.
    EHRRecord {
        age: (rng.random::<f64>() >= 0.12).then_some((age.max(5.0) * 10.0).round() / 10.0),
        height: (rng.random::<f64>() >= 0.12).then_some((height * 10.0).round() / 10.0),
        weight: (rng.random::<f64>() >= 0.12).then_some((weight.max(20.0) * 10.0).round() / 10.0),
        sex: if rng.random::<f64>() < 0.12 { Sex::Unk } else { sex },
        patient_type: if rng.random::<f64>() < 0.12 { PatientType::Unk } else { ptype },
        event: if rng.random::<f64>() < 0.12 { EventCategory::Unk } else { event },
    }
}

/// Standard patient id scheme used by the dataset builders.
pub fn patient_id(i: usize) -> String {
    format!("p{i:05}")
}

#[cfg(test)]
mod tests;
