//! Patient-level dataset indices: leakage-free splits, cross-orientation
//! combination enumeration with inverse-frequency weights, and the on-disk
//! layout (one directory per patient, raw volumes + sidecars, `index.json`).
//!
//! An opened [`Dataset`] counts voxel-data reads per split so staged commands
//! can prove they never touched the test split.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ehr::{ehr_to_csv, EHRRecord};
use crate::error::{Error, Result};
use crate::exec;
use crate::synth::{generate_phantom_study, PhantomSpec, StudyRecord};
use crate::util;
use crate::volume::{load_mask, load_volume, save_mask, save_volume, Orientation, SegMask, VolumeTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Patient-level split assignment plus every study record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub seed: u64,
    pub splits: BTreeMap<Split, Vec<String>>,
    pub records: BTreeMap<String, StudyRecord>,
}

impl DatasetIndex {
    pub fn patients(&self, split: Split) -> &[String] {
        self.splits.get(&split).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn record(&self, patient_id: &str) -> Result<&StudyRecord> {
        self.records
            .get(patient_id)
            .ok_or_else(|| Error::Validation(format!("unknown patient {patient_id}")))
    }

    pub fn split_of(&self, patient_id: &str) -> Option<Split> {
        Split::ALL
            .into_iter()
            .find(|s| self.patients(*s).iter().any(|p| p == patient_id))
    }

    /// Enforce the two index invariants: pairwise-disjoint splits at patient
    /// granularity, and the splits exactly covering the record set.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for split in Split::ALL {
            for pid in self.patients(split) {
                if !seen.insert(pid.clone()) {
                    return Err(Error::Validation(format!("patient {pid} appears in two splits")));
                }
                if !self.records.contains_key(pid) {
                    return Err(Error::Validation(format!("split lists unknown patient {pid}")));
                }
            }
        }
        if seen.len() != self.records.len() {
            return Err(Error::Validation(format!(
                "splits cover {} patients but the index has {}",
                seen.len(),
                self.records.len()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }
}

/// Deterministic shuffled partition at patient granularity.
pub fn split_by_patient(records: &[StudyRecord], fractions: (f64, f64, f64), seed: u64) -> Result<DatasetIndex> {
    if records.is_empty() {
        return Err(Error::Validation("cannot split an empty record list".into()));
    }
    let (ft, fv, fe) = fractions;
    if (ft + fv + fe - 1.0).abs() > 1e-9 || ft < 0.0 || fv < 0.0 || fe < 0.0 {
        return Err(Error::Validation(format!("fractions must be nonnegative and sum to 1, got {fractions:?}")));
    }
    let mut ids: Vec<String> = records.iter().map(|r| r.patient_id.clone()).collect();
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::Validation("duplicate patient_id in record list".into()));
    }
    ids.sort();
    let mut rng = util::stream(seed, "patient-split");
    // Fisher-Yates over the sorted ids keeps the shuffle independent of the
    // caller's record order.
    for i in (1..ids.len()).rev() {
        let j = rand::Rng::random_range(&mut rng, 0..=i);
        ids.swap(i, j);
    }
    let n = ids.len() as f64;
    let n_train = (n * ft).round() as usize;
    let n_train_val = (n * (ft + fv)).round() as usize;
    let mut splits = BTreeMap::new();
    splits.insert(Split::Train, ids[..n_train].to_vec());
    splits.insert(Split::Val, ids[n_train..n_train_val].to_vec());
    splits.insert(Split::Test, ids[n_train_val..].to_vec());
    let index = DatasetIndex {
        seed,
        splits,
        records: records.iter().map(|r| (r.patient_id.clone(), r.clone())).collect(),
    };
    index.validate()?;
    Ok(index)
}

/// One cross-orientation scan combination and its inverse-frequency weight.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionTuple {
    pub sag: String,
    pub cor: String,
    pub ax: String,
    pub weight: f64,
}

/// Cartesian product of per-orientation scan lists; every tuple carries
/// weight `1 / n_tuples` so each patient contributes unit weight in total.
/// `None` signals the caller to exclude the patient (missing orientation).
pub fn enumerate_fusion_samples(record: &StudyRecord) -> Option<Vec<FusionTuple>> {
    let sag = record.scans.get(&Orientation::Sagittal)?;
    let cor = record.scans.get(&Orientation::Coronal)?;
    let ax = record.scans.get(&Orientation::Axial)?;
    if sag.is_empty() || cor.is_empty() || ax.is_empty() {
        return None;
    }
    let count = sag.len() * cor.len() * ax.len();
    let weight = 1.0 / count as f64;
    let mut out = Vec::with_capacity(count);
    for s in sag {
        for c in cor {
            for a in ax {
                out.push(FusionTuple { sag: s.clone(), cor: c.clone(), ax: a.clone(), weight });
            }
        }
    }
    Some(out)
}

// ---- on-disk layout ----

fn patient_dir(root: &Path, patient_id: &str) -> PathBuf {
    root.join("patients").join(patient_id)
}

/// Generate every patient of `spec`, write volumes/masks/index/EHR to `dir`,
/// and return the index. Generation is parallel per patient.
pub fn build_dataset(spec: &PhantomSpec, fractions: (f64, f64, f64), dir: &Path) -> Result<DatasetIndex> {
    spec.validate()?;
    fs::create_dir_all(dir)?;
    let ids: Vec<String> = (0..spec.n_patients).map(crate::synth::patient_id).collect();
    let studies = exec::map(&ids, |pid| generate_phantom_study(spec, pid));
    let mut records = Vec::with_capacity(ids.len());
    let mut ehr_rows: BTreeMap<String, EHRRecord> = BTreeMap::new();
    for study in studies {
        let study = study?;
        let pdir = patient_dir(dir, &study.record.patient_id);
        for v in &study.volumes {
            save_volume(&pdir, v)?;
        }
        for (scan_id, mask) in &study.masks {
            save_mask(&pdir, scan_id, mask)?;
        }
        if let Some(ehr) = &study.record.ehr {
            ehr_rows.insert(study.record.patient_id.clone(), ehr.clone());
        }
        records.push(study.record);
    }
    let index = split_by_patient(&records, fractions, spec.seed)?;
    fs::write(dir.join("index.json"), index.to_json()?)?;
    fs::write(dir.join("ehr.csv"), ehr_to_csv(&ehr_rows))?;
    Ok(index)
}

/// Handle to an on-disk dataset. Voxel-data reads are counted per split so
/// leakage assertions can be made about whole pipeline stages.
pub struct Dataset {
    pub dir: PathBuf,
    pub index: DatasetIndex,
    reads: Arc<[AtomicUsize; 3]>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Dataset> {
        let index_path = dir.join("index.json");
        if !index_path.exists() {
            return Err(Error::MissingArtifact(format!("dataset index {}", index_path.display())));
        }
        let index: DatasetIndex = serde_json::from_slice(&fs::read(&index_path)?)?;
        index.validate()?;
        Ok(Dataset {
            dir: dir.to_path_buf(),
            index,
            reads: Arc::new([AtomicUsize::new(0), AtomicUsize::new(0), AtomicUsize::new(0)]),
        })
    }

    /// Content identity of the dataset (hash of the serialized index).
    pub fn content_hash(&self) -> Result<String> {
        Ok(util::content_hash(&fs::read(self.dir.join("index.json"))?))
    }

    fn track(&self, patient_id: &str) {
        if let Some(split) = self.index.split_of(patient_id) {
            self.reads[split.index()].fetch_add(1, Ordering::Relaxed);
        }
    }

    /// Voxel-data reads per split since the last reset.
    pub fn access_counts(&self) -> [usize; 3] {
        [0, 1, 2].map(|i| self.reads[i].load(Ordering::Relaxed))
    }

    pub fn reset_access_counts(&self) {
        for c in self.reads.iter() {
            c.store(0, Ordering::Relaxed);
        }
    }

    pub fn load_volume(&self, patient_id: &str, scan_id: &str) -> Result<VolumeTensor> {
        self.track(patient_id);
        load_volume(&patient_dir(&self.dir, patient_id), scan_id)
    }

    pub fn load_mask(&self, patient_id: &str, scan_id: &str) -> Result<SegMask> {
        self.track(patient_id);
        load_mask(&patient_dir(&self.dir, patient_id), scan_id)
    }

    /// (patient, scan) pairs of one split and orientation, index order.
    pub fn scan_refs(&self, split: Split, orientation: Orientation) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for pid in self.index.patients(split) {
            if let Ok(rec) = self.index.record(pid) {
                if let Some(scans) = rec.scans.get(&orientation) {
                    for scan in scans {
                        out.push((pid.clone(), scan.clone()));
                    }
                }
            }
        }
        out
    }

    /// (patient, scan) pairs that carry a segmentation mask.
    pub fn masked_scan_refs(&self, split: Split, orientation: Orientation) -> Vec<(String, String)> {
        self.scan_refs(split, orientation)
            .into_iter()
            .filter(|(pid, scan)| {
                self.index
                    .record(pid)
                    .map(|r| r.mask_scan_ids.contains(scan))
                    .unwrap_or(false)
            })
            .collect()
    }

    /// All volumes of a split and orientation, loaded in index order.
    pub fn load_split_volumes(&self, split: Split, orientation: Orientation) -> Result<Vec<VolumeTensor>> {
        self.scan_refs(split, orientation)
            .iter()
            .map(|(pid, scan)| self.load_volume(pid, scan))
            .collect()
    }

    pub fn labels(&self, patient_id: &str) -> Result<Vec<u8>> {
        Ok(self.index.record(patient_id)?.labels.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::patient_id;
    use tempfile::tempdir;

    fn toy_records(n: usize) -> Vec<StudyRecord> {
        (0..n)
            .map(|i| {
                let mut scans = BTreeMap::new();
                for o in Orientation::ALL {
                    scans.insert(o, vec![format!("{}-{}-0", patient_id(i), o.short())]);
                }
                StudyRecord {
                    patient_id: patient_id(i),
                    scans,
                    labels: vec![0, 1],
                    ehr: None,
                    mask_scan_ids: vec![],
                }
            })
            .collect()
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let records = toy_records(10);
        let idx = split_by_patient(&records, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!(idx.patients(Split::Train).len(), 8);
        assert_eq!(idx.patients(Split::Val).len(), 1);
        assert_eq!(idx.patients(Split::Test).len(), 1);
        idx.validate().unwrap();
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let records = toy_records(20);
        let a = split_by_patient(&records, (0.6, 0.2, 0.2), 7).unwrap();
        let b = split_by_patient(&records, (0.6, 0.2, 0.2), 7).unwrap();
        assert_eq!(a, b);
        let c = split_by_patient(&records, (0.6, 0.2, 0.2), 8).unwrap();
        assert_ne!(a.splits, c.splits);
        // Identical serialization for identical inputs.
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn split_rejects_bad_inputs() {
        assert!(split_by_patient(&[], (0.8, 0.1, 0.1), 0).is_err());
        let records = toy_records(4);
        assert!(split_by_patient(&records, (0.8, 0.1, 0.2), 0).is_err());
        let mut dup = toy_records(2);
        dup[1].patient_id = dup[0].patient_id.clone();
        assert!(split_by_patient(&dup, (0.5, 0.25, 0.25), 0).is_err());
    }

    #[test]
    fn exhaustive_leakage_check_over_many_seeds() {
        let records = toy_records(23);
        for seed in 0..50 {
            let idx = split_by_patient(&records, (0.7, 0.15, 0.15), seed).unwrap();
            idx.validate().unwrap();
            for a in Split::ALL {
                for b in Split::ALL {
                    if a < b {
                        let sa: BTreeSet<_> = idx.patients(a).iter().collect();
                        let sb: BTreeSet<_> = idx.patients(b).iter().collect();
                        assert!(sa.is_disjoint(&sb), "seed {seed}: {a}/{b} overlap");
                    }
                }
            }
        }
    }

    fn record_with_counts(sag: usize, cor: usize, ax: usize) -> StudyRecord {
        let mut scans = BTreeMap::new();
        scans.insert(Orientation::Sagittal, (0..sag).map(|i| format!("s{i}")).collect());
        scans.insert(Orientation::Coronal, (0..cor).map(|i| format!("c{i}")).collect());
        scans.insert(Orientation::Axial, (0..ax).map(|i| format!("a{i}")).collect());
        StudyRecord {
            patient_id: "p".into(),
            scans,
            labels: vec![0],
            ehr: None,
            mask_scan_ids: vec![],
        }
    }

    #[test]
    fn enumeration_counts_and_weights() {
        let one = enumerate_fusion_samples(&record_with_counts(1, 1, 1)).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].weight, 1.0);

        let two = enumerate_fusion_samples(&record_with_counts(2, 1, 1)).unwrap();
        assert_eq!(two.len(), 2);
        assert!(two.iter().all(|t| t.weight == 0.5));

        // Four scans per orientation blow up to 4^3 = 64 combinations.
        let many = enumerate_fusion_samples(&record_with_counts(4, 4, 4)).unwrap();
        assert_eq!(many.len(), 64);
        assert!(many.iter().all(|t| (t.weight - 1.0 / 64.0).abs() < 1e-15));
    }

    #[test]
    fn enumeration_weights_sum_to_one_for_all_multiplicities() {
        for sag in 1..=4usize {
            for cor in 1..=4usize {
                for ax in 1..=4usize {
                    let tuples = enumerate_fusion_samples(&record_with_counts(sag, cor, ax)).unwrap();
                    assert_eq!(tuples.len(), sag * cor * ax);
                    let total: f64 = tuples.iter().map(|t| t.weight).sum();
                    assert!((total - 1.0).abs() < 1e-12, "({sag},{cor},{ax}): {total}");
                }
            }
        }
    }

    #[test]
    fn missing_orientation_is_an_exclusion_signal() {
        let mut record = record_with_counts(1, 1, 1);
        record.scans.get_mut(&Orientation::Axial).unwrap().clear();
        assert!(enumerate_fusion_samples(&record).is_none());
        record.scans.remove(&Orientation::Axial);
        assert!(enumerate_fusion_samples(&record).is_none());
    }

    #[test]
    fn build_and_open_round_trip_with_access_tracking() {
        let dir = tempdir().unwrap();
        let mut spec = PhantomSpec::desk(12, 5);
        spec.resolution = crate::volume::Resolution::new(4, 8, 8);
        let index = build_dataset(&spec, (0.5, 0.25, 0.25), dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.index, index);
        assert_eq!(ds.access_counts(), [0, 0, 0]);

        let train_scans = ds.scan_refs(Split::Train, Orientation::Sagittal);
        assert!(!train_scans.is_empty());
        let (pid, scan) = &train_scans[0];
        let v = ds.load_volume(pid, scan).unwrap();
        assert_eq!(v.orientation, Orientation::Sagittal);
        assert_eq!(ds.access_counts()[Split::Train.index()], 1);
        assert_eq!(ds.access_counts()[Split::Test.index()], 0);

        // Masked scans exist for sagittal and coronal planes.
        assert!(!ds.masked_scan_refs(Split::Train, Orientation::Sagittal).is_empty());
        let ehr = std::fs::read_to_string(dir.path().join("ehr.csv")).unwrap();
        assert!(ehr.starts_with("patient_id,"));
    }

    #[test]
    fn identical_seed_builds_identical_indices() {
        let spec = {
            let mut s = PhantomSpec::desk(8, 9);
            s.resolution = crate::volume::Resolution::new(4, 8, 8);
            s
        };
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        build_dataset(&spec, (0.5, 0.25, 0.25), d1.path()).unwrap();
        build_dataset(&spec, (0.5, 0.25, 0.25), d2.path()).unwrap();
        let b1 = std::fs::read(d1.path().join("index.json")).unwrap();
        let b2 = std::fs::read(d2.path().join("index.json")).unwrap();
        assert_eq!(b1, b2, "index serialization must be byte-identical");
    }
}
