//! Structured EHR attributes: encoding, the tabular head, and logit-level
//! late fusion with the imaging branch.
//!
//! Missing values never drop a record: enums carry an explicit `UNK` state and
//! missing numerics become zero after z-scoring. The feature layout is fixed:
//! 3 standardized continuous + 3 sex one-hot + 3 patient-type one-hot + an
//! 8-dimensional learned event embedding = 17 dimensions.

use std::collections::BTreeMap;

use ndarray::{Array2, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Arr, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, ParamBinding, ParamSet};

pub const EHR_FEATURE_DIM: usize = 17;
pub const EVENT_EMBED_DIM: usize = 8;
/// 8 event categories plus the UNK row.
pub const EVENT_VOCAB: usize = 9;
pub const EHR_HIDDEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Male,
    Female,
    Unk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatientType {
    Athlete,
    NonAthlete,
    Unk,
}

/// Injury-inducing event, eight mutually exclusive categories.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventCategory {
    Overuse,
    Traffic,
    Duty,
    DailyLife,
    Sports,
    Spontaneous,
    Actor,
    Other,
    Unk,
}

impl EventCategory {
    pub fn index(self) -> usize {
        match self {
            EventCategory::Overuse => 0,
            EventCategory::Traffic => 1,
            EventCategory::Duty => 2,
            EventCategory::DailyLife => 3,
            EventCategory::Sports => 4,
            EventCategory::Spontaneous => 5,
            EventCategory::Actor => 6,
            EventCategory::Other => 7,
            EventCategory::Unk => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EHRRecord {
    pub age: Option<f64>,
    pub height: Option<f64>,
    pub weight: Option<f64>,
    pub sex: Sex,
    pub patient_type: PatientType,
    pub event: EventCategory,
}

impl Default for EHRRecord {
    fn default() -> Self {
        EHRRecord {
            age: None,
            height: None,
            weight: None,
            sex: Sex::Unk,
            patient_type: PatientType::Unk,
            event: EventCategory::Unk,
        }
    }
}

/// Z-score statistics for the continuous fields, fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EhrStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl EhrStats {
    /// Fit per-field mean/std over present values only.
    pub fn fit<'a>(records: impl Iterator<Item = &'a EHRRecord>) -> EhrStats {
        let mut sums = [0.0; 3];
        let mut sqs = [0.0; 3];
        let mut counts = [0usize; 3];
        for rec in records {
            for (i, v) in [rec.age, rec.height, rec.weight].into_iter().enumerate() {
                if let Some(v) = v {
                    sums[i] += v;
                    sqs[i] += v * v;
                    counts[i] += 1;
                }
            }
        }
        let mut mean = [0.0; 3];
        let mut std = [1.0; 3];
        for i in 0..3 {
            if counts[i] > 0 {
                mean[i] = sums[i] / counts[i] as f64;
                let var = (sqs[i] / counts[i] as f64 - mean[i] * mean[i]).max(0.0);
                if var > 1e-12 {
                    std[i] = var.sqrt();
                }
            }
        }
        EhrStats { mean, std }
    }

    fn z(&self, i: usize, v: Option<f64>) -> f64 {
        match v {
            Some(v) => (v - self.mean[i]) / self.std[i],
            None => 0.0,
        }
    }
}

/// The 9 static dimensions: continuous z-scores and the two one-hot blocks,
/// ordered (male, female, UNK) and (athlete, non_athlete, UNK).
pub fn encode_static(rec: &EHRRecord, stats: &EhrStats) -> [f64; 9] {
    let mut out = [0.0; 9];
    out[0] = stats.z(0, rec.age);
    out[1] = stats.z(1, rec.height);
    out[2] = stats.z(2, rec.weight);
    let sex_slot = match rec.sex {
        Sex::Male => 3,
        Sex::Female => 4,
        Sex::Unk => 5,
    };
    out[sex_slot] = 1.0;
    let ptype_slot = match rec.patient_type {
        PatientType::Athlete => 6,
        PatientType::NonAthlete => 7,
        PatientType::Unk => 8,
    };
    out[ptype_slot] = 1.0;
    out
}

/// Fixed-length 17-dim feature for one record under the current event table.
#[derive(Clone, Debug, PartialEq)]
pub struct EHRFeature {
    pub vector: Vec<f64>,
}

pub fn encode_ehr(rec: &EHRRecord, stats: &EhrStats, event_table: &Arr) -> EHRFeature {
    assert_eq!(event_table.shape(), &[EVENT_VOCAB, EVENT_EMBED_DIM]);
    let mut vector = encode_static(rec, stats).to_vec();
    let row = rec.event.index();
    for j in 0..EVENT_EMBED_DIM {
        vector.push(event_table[IxDyn(&[row, j])]);
    }
    EHRFeature { vector }
}

// ---- tabular head ----

/// Initialise the EHR head: 17 -> 64 (ReLU, LayerNorm, dropout 0.2) -> K,
/// plus the event embedding table scaled small so early logits stay near zero.
pub fn init_ehr_params(n_labels: usize, seed: u64) -> ParamSet {
    let mut rng = crate::util::stream(seed, "ehr-init");
    let mut p = ParamSet::new();
    p.insert("ehr/event_table", nn::init_normal(&[EVENT_VOCAB, EVENT_EMBED_DIM], 0.1, &mut rng));
    p.insert("ehr/fc1/w", nn::init_fan_in(&[EHR_FEATURE_DIM, EHR_HIDDEN], EHR_FEATURE_DIM, &mut rng));
    p.insert("ehr/fc1/b", nn::zeros(&[EHR_HIDDEN]));
    p.insert("ehr/ln/g", nn::ones(&[EHR_HIDDEN]));
    p.insert("ehr/ln/b", nn::zeros(&[EHR_HIDDEN]));
    p.insert("ehr/out/w", nn::init_fan_in(&[EHR_HIDDEN, n_labels], EHR_HIDDEN, &mut rng));
    p.insert("ehr/out/b", nn::zeros(&[n_labels]));
    p
}

/// Build the head's logits for a batch of records. `dropout_mask` is given in
/// training only; evaluation is deterministic.
pub fn ehr_head_logits(
    tape: &mut Tape,
    binding: &ParamBinding,
    records: &[&EHRRecord],
    stats: &EhrStats,
    dropout_mask: Option<Arr>,
) -> Var {
    let b = records.len();
    let mut stat = Array2::<f64>::zeros((b, 9));
    let mut events = Vec::with_capacity(b);
    for (r, rec) in records.iter().enumerate() {
        let s = encode_static(rec, stats);
        for (j, v) in s.iter().enumerate() {
            stat[[r, j]] = *v;
        }
        events.push(rec.event.index());
    }
    let stat = tape.leaf(stat.into_dyn());
    let emb = tape.gather_rows(binding.var("ehr/event_table"), events);
    let x = tape.concat(&[stat, emb], 1);
    let h = tape.matmul(x, binding.var("ehr/fc1/w"));
    let h = tape.add_row_bias(h, binding.var("ehr/fc1/b"));
    let h = tape.relu(h);
    let h = tape.layer_norm_rows(h, binding.var("ehr/ln/g"), binding.var("ehr/ln/b"), 1e-5);
    let h = match dropout_mask {
        Some(mask) => tape.mul_const(h, mask),
        None => h,
    };
    let z = tape.matmul(h, binding.var("ehr/out/w"));
    tape.add_row_bias(z, binding.var("ehr/out/b"))
}

// ---- late fusion ----

/// Per-label convex combination in logit space, weighted by sigmoid(w).
pub fn late_fuse(z_mri: &[f64], z_ehr: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    if z_mri.len() != z_ehr.len() || z_mri.len() != w.len() {
        return Err(Error::Shape(format!(
            "late fusion lengths disagree: mri {}, ehr {}, gamma {}",
            z_mri.len(),
            z_ehr.len(),
            w.len()
        )));
    }
    Ok(z_mri
        .iter()
        .zip(z_ehr)
        .zip(w)
        .map(|((m, e), w)| {
            let gamma = crate::autodiff::sigmoid_scalar(*w);
            gamma * m + (1.0 - gamma) * e
        })
        .collect())
}

/// Tape version of [`late_fuse`] over (B, K) logit matrices; `w` is the
/// trainable (K,) pre-sigmoid weight vector.
pub fn late_fuse_logits(tape: &mut Tape, z_mri: Var, z_ehr: Var, w: Var) -> Var {
    let (b, k) = {
        let s = tape.shape(z_mri);
        (s[0], s[1])
    };
    assert_eq!(tape.shape(z_ehr), &[b, k], "late fusion logits shape mismatch");
    let wrow = tape.reshape(w, &[1, k]);
    let gamma_row = tape.sigmoid(wrow);
    let mut rows_g = Vec::with_capacity(b);
    for _ in 0..b {
        rows_g.push(gamma_row);
    }
    let gamma = tape.concat(&rows_g, 0);
    let ones = tape.leaf(Arr::from_elem(IxDyn(&[b, k]), 1.0));
    let inv = tape.sub(ones, gamma);
    let a = tape.mul(gamma, z_mri);
    let bterm = tape.mul(inv, z_ehr);
    tape.add(a, bterm)
}

// ---- CSV interchange ----

/// Header used by the EHR CSV interface.
pub const EHR_CSV_HEADER: &str = "patient_id,age,height,weight,sex,patient_type,event";

pub fn ehr_to_csv(rows: &BTreeMap<String, EHRRecord>) -> String {
    let mut out = String::from(EHR_CSV_HEADER);
    out.push('\n');
    for (pid, rec) in rows {
        let num = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let sex = match rec.sex {
            Sex::Male => "male",
            Sex::Female => "female",
            Sex::Unk => "",
        };
        let ptype = match rec.patient_type {
            PatientType::Athlete => "athlete",
            PatientType::NonAthlete => "non_athlete",
            PatientType::Unk => "",
        };
        let event = match rec.event {
            EventCategory::Overuse => "overuse",
            EventCategory::Traffic => "traffic",
            EventCategory::Duty => "duty",
            EventCategory::DailyLife => "daily_life",
            EventCategory::Sports => "sports",
            EventCategory::Spontaneous => "spontaneous",
            EventCategory::Actor => "actor",
            EventCategory::Other => "other",
            EventCategory::Unk => "",
        };
        out.push_str(&format!(
            "{pid},{},{},{},{sex},{ptype},{event}\n",
            num(rec.age),
            num(rec.height),
            num(rec.weight)
        ));
    }
    out
}

pub fn ehr_from_csv(text: &str) -> Result<BTreeMap<String, EHRRecord>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Validation("empty EHR csv".into()))?;
    if header.trim() != EHR_CSV_HEADER {
        return Err(Error::Validation(format!("unexpected EHR csv header {header:?}")));
    }
    let mut out = BTreeMap::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 7 {
            return Err(Error::Validation(format!("EHR csv line {} has {} cells", lineno + 2, cells.len())));
        }
        let parse_num = |s: &str| -> Result<Option<f64>> {
            if s.trim().is_empty() {
                Ok(None)
            } else {
                s.trim()
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|_| Error::Validation(format!("bad number {s:?} in EHR csv")))
            }
        };
        let sex = match cells[4].trim() {
            "male" => Sex::Male,
            "female" => Sex::Female,
            "" | "unk" => Sex::Unk,
            other => return Err(Error::Validation(format!("bad sex {other:?}"))),
        };
        let patient_type = match cells[5].trim() {
            "athlete" => PatientType::Athlete,
            "non_athlete" => PatientType::NonAthlete,
            "" | "unk" => PatientType::Unk,
            other => return Err(Error::Validation(format!("bad patient_type {other:?}"))),
        };
        let event = match cells[6].trim() {
            "overuse" => EventCategory::Overuse,
            "traffic" => EventCategory::Traffic,
            "duty" => EventCategory::Duty,
            "daily_life" => EventCategory::DailyLife,
            "sports" => EventCategory::Sports,
            "spontaneous" => EventCategory::Spontaneous,
            "actor" => EventCategory::Actor,
            "other" => EventCategory::Other,
            "" | "unk" => EventCategory::Unk,
            other => return Err(Error::Validation(format!("bad event {other:?}"))),
        };
        out.insert(
            cells[0].trim().to_string(),
            EHRRecord {
                age: parse_num(cells[1])?,
                height: parse_num(cells[2])?,
                weight: parse_num(cells[3])?,
                sex,
                patient_type,
                event,
            },
        );
    }
    Ok(out)
}
