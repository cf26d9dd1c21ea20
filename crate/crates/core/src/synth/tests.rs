use super::*;
use crate::metrics::{auroc, ScoredLabels};
use crate::synth::phantom::PhantomModel;
use ndarray::IxDyn;

fn desk_spec(seed: u64) -> PhantomSpec {
    PhantomSpec::desk(16, seed)
}

#[test]
fn zero_prevalence_forces_all_labels_off_with_nonzero_masks() {
    let mut spec = desk_spec(3);
    spec.label_prevalence = 0.0;
    let study = generate_phantom_study(&spec, "p00000").unwrap();
    assert_eq!(study.record.labels, vec![0, 0, 0, 0]);
    let mask = study.masks.values().next().unwrap();
    assert!(mask.classes.iter().any(|c| *c > 0), "mask must mark structures");
    assert!(mask.classes.iter().all(|c| *c <= spec.n_structures as u8));
}

#[test]
fn generation_is_bit_deterministic() {
    let spec = desk_spec(11);
    let a = generate_phantom_study(&spec, "p00007").unwrap();
    let b = generate_phantom_study(&spec, "p00007").unwrap();
    assert_eq!(a.record, b.record);
    assert_eq!(a.volumes.len(), b.volumes.len());
    for (va, vb) in a.volumes.iter().zip(&b.volumes) {
        assert_eq!(va.scan_id, vb.scan_id);
        assert_eq!(va.data, vb.data);
    }
    for (id, ma) in &a.masks {
        assert_eq!(&b.masks[id], ma);
    }
}

#[test]
fn lesion_region_mean_margin_from_generator_internals() {
    // Same patient stream with labels forced on vs off: the intensity
    // difference inside the generator's own region map is the lesion bump.
    let mut on = desk_spec(5);
    on.label_prevalence = 1.0;
    let mut off = on.clone();
    off.label_prevalence = 0.0;
    let study_on = generate_phantom_study(&on, "p00001").unwrap();
    let study_off = generate_phantom_study(&off, "p00001").unwrap();

    for label in 0..on.n_labels {
        let orientation = PhantomModel::preferred_orientation(label);
        let region = lesion_region_mask(&on, &study_on.model, orientation, label);
        let n_region = region.iter().filter(|m| **m).count();
        assert!(n_region > 0, "label {label} region empty on the final grid");
        let res = on.resolution;
        let mut diff_sum = 0.0;
        for d in 0..res.d {
            for h in 0..res.h {
                for w in 0..res.w {
                    if region[IxDyn(&[d, h, w])] {
                        let p = final_grid_coords(&on, orientation, d, h, w);
                        let v_on = study_on.model.intensity(p, orientation, on.label_effect_strength);
                        let v_off = study_off.model.intensity(p, orientation, off.label_effect_strength);
                        diff_sum += v_on - v_off;
                    }
                }
            }
        }
        let margin = diff_sum / n_region as f64;
        // Inside one sigma the bump is at least exp(-1) of its 0.5 amplitude.
        assert!(margin > 0.15, "label {label}: margin {margin}");
    }
}

#[test]
fn preprocess_maps_range_to_unit_interval() {
    let mut raw = Arr::zeros(IxDyn(&[1, 8, 8, 8]));
    for (i, v) in raw.iter_mut().enumerate() {
        *v = (i % 101) as f64; // min 0, max 100
    }
    let out = preprocess_volume(&raw, Resolution::new(8, 8, 8)).unwrap();
    let min = out.iter().copied().fold(f64::INFINITY, f64::min);
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!((min + 1.0).abs() < 1e-12);
    assert!((max - 1.0).abs() < 1e-12);
}

#[test]
fn preprocess_constant_volume_is_all_zeros() {
    let raw = Arr::from_elem(IxDyn(&[1, 8, 8, 8]), 7.0);
    let out = preprocess_volume(&raw, Resolution::new(4, 8, 8)).unwrap();
    assert!(out.iter().all(|v| *v == 0.0));
}

#[test]
fn preprocess_takes_central_slice_window() {
    // 20 raw slices, profile depth 16: slices 2..=17 are retained.
    let mut raw = Arr::zeros(IxDyn(&[1, 20, 4, 4]));
    for d in 0..20 {
        for h in 0..4 {
            for w in 0..4 {
                raw[IxDyn(&[0, d, h, w])] = d as f64;
            }
        }
    }
    let out = preprocess_volume(&raw, Resolution::new(16, 4, 4)).unwrap();
    // min-max over retained slices 2..17 maps d to 2*(d-2)/15 - 1.
    for d in 0..16 {
        let expect = 2.0 * d as f64 / 15.0 - 1.0;
        assert!((out[IxDyn(&[0, d, 0, 0])] - expect).abs() < 1e-12, "slice {d}");
    }
}

#[test]
fn preprocess_rejects_short_stacks() {
    let raw = Arr::zeros(IxDyn(&[1, 8, 8, 8]));
    assert!(preprocess_volume(&raw, Resolution::new(16, 8, 8)).is_err());
}

#[test]
fn volumes_stay_in_unit_range_over_many_phantoms() {
    let mut checked = 0usize;
    for seed in 0..250 {
        let mut spec = PhantomSpec::desk(1, seed);
        spec.resolution = Resolution::new(4, 8, 8);
        let study = generate_phantom_study(&spec, "p00000").unwrap();
        for v in &study.volumes {
            v.assert_preprocessed(spec.resolution).unwrap();
            checked += 1;
        }
    }
    assert!(checked >= 750);
}

#[test]
fn multi_scan_fraction_controls_repeats() {
    let mut spec = desk_spec(21);
    spec.multi_scan_fraction = 0.0;
    for i in 0..8 {
        let study = generate_phantom_study(&spec, &patient_id(i)).unwrap();
        assert_eq!(study.volumes.len(), 3);
    }
    spec.multi_scan_fraction = 0.45;
    let mut saw_repeat = false;
    for i in 0..32 {
        let study = generate_phantom_study(&spec, &patient_id(i)).unwrap();
        let n: usize = study.record.scans.values().map(|s| s.len()).sum();
        assert!((3..=4).contains(&n));
        saw_repeat |= n == 4;
    }
    assert!(saw_repeat, "no multi-scan patient in 32 draws at fraction 0.45");
}

#[test]
fn masks_align_with_their_volumes_and_cover_all_classes() {
    let spec = desk_spec(2);
    let mut seen = vec![false; spec.n_structures + 1];
    for i in 0..6 {
        let study = generate_phantom_study(&spec, &patient_id(i)).unwrap();
        assert!(!study.record.mask_scan_ids.is_empty());
        for v in &study.volumes {
            if let Some(mask) = study.masks.get(&v.scan_id) {
                mask.assert_matches(v).unwrap();
                assert!(MASKED_ORIENTATIONS.contains(&v.orientation));
                for c in mask.classes.iter() {
                    seen[*c as usize] = true;
                }
            }
        }
    }
    assert!(seen.iter().all(|s| *s), "every class id in [0, S] should appear: {seen:?}");
}

#[test]
fn label_learnability_oracle_from_region_means() {
    // Region-mean intensity on the preferred plane must separate each label
    // with AUROC > 0.9, using nothing but generator internals.
    let spec = PhantomSpec::desk(120, 17);
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); spec.n_labels];
    let mut truth: Vec<Vec<u8>> = vec![Vec::new(); spec.n_labels];
    for i in 0..spec.n_patients {
        let study = generate_phantom_study(&spec, &patient_id(i)).unwrap();
        for label in 0..spec.n_labels {
            let orientation = PhantomModel::preferred_orientation(label);
            let region = lesion_region_mask(&spec, &study.model, orientation, label);
            let scan_id = &study.record.scans[&orientation][0];
            let vol = study.volumes.iter().find(|v| &v.scan_id == scan_id).unwrap();
            let mut sum = 0.0;
            let mut n = 0usize;
            for (v, m) in vol.data.iter().zip(region.iter()) {
                if *m {
                    sum += v;
                    n += 1;
                }
            }
            scores[label].push(sum / n as f64);
            truth[label].push(study.record.labels[label]);
        }
    }
    for label in 0..spec.n_labels {
        let s = ScoredLabels::new(scores[label].clone(), truth[label].clone()).unwrap();
        let a = auroc(&s).expect("both classes present");
        assert!(a > 0.9, "label {label}: oracle AUROC {a}");
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let mut spec = desk_spec(0);
    spec.multi_scan_fraction = 0.6;
    assert!(spec.validate().is_err());
    let mut spec = desk_spec(0);
    spec.label_effect_strength = 0.0;
    assert!(spec.validate().is_err());
    let mut spec = desk_spec(0);
    spec.n_patients = 0;
    assert!(spec.validate().is_err());
}
