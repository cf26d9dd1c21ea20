//! Evaluation statistics: per-label AUROC and AP, macro/micro PRF, Dice, and
//! the paired sign-flip permutation test.
//!
//! Undefined values (single-class AUROC, precision with no predicted
//! positives) are flagged explicitly in the report rather than silently
//! imputed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;
use crate::volume::SegMask;

/// Scores with binary ground truth for one label.
#[derive(Clone, Debug)]
pub struct ScoredLabels {
    pub scores: Vec<f64>,
    pub truth: Vec<u8>,
}

impl ScoredLabels {
    pub fn new(scores: Vec<f64>, truth: Vec<u8>) -> Result<ScoredLabels> {
        if scores.len() != truth.len() {
            return Err(Error::Shape(format!(
                "scores ({}) and truth ({}) lengths differ",
                scores.len(),
                truth.len()
            )));
        }
        if !truth.iter().all(|t| *t <= 1) {
            return Err(Error::Validation("truth must be 0/1".into()));
        }
        Ok(ScoredLabels { scores, truth })
    }
}

/// Probability that a positive outranks a negative, ties counted half.
/// `None` when the truth contains a single class.
pub fn auroc(s: &ScoredLabels) -> Option<f64> {
    let n_pos = s.truth.iter().filter(|t| **t == 1).count();
    let n_neg = s.truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // Average ranks handle ties; AUROC is the normalised Mann-Whitney U.
    let mut order: Vec<usize> = (0..s.scores.len()).collect();
    order.sort_by(|&a, &b| s.scores[a].partial_cmp(&s.scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && s.scores[order[j + 1]] == s.scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share the average rank.
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if s.truth[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Step-wise average precision over descending-score thresholds, ties grouped.
/// `None` when there are no positives.
pub fn average_precision(s: &ScoredLabels) -> Option<f64> {
    let n_pos = s.truth.iter().filter(|t| **t == 1).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..s.scores.len()).collect();
    order.sort_by(|&a, &b| s.scores[b].partial_cmp(&s.scores[a]).unwrap());
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && s.scores[order[j + 1]] == s.scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            seen += 1;
            tp += (s.truth[idx] == 1) as usize;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Some(ap)
}

/// Unweighted mean of the defined per-label AUROCs plus the excluded labels.
pub fn macro_auroc(per_label: &[Option<f64>]) -> (Option<f64>, Vec<usize>) {
    let excluded: Vec<usize> = per_label
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.is_none().then_some(i))
        .collect();
    let defined: Vec<f64> = per_label.iter().flatten().copied().collect();
    let mean = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    (mean, excluded)
}

/// Class-averaged (macro) and overall (micro) precision/recall/F1 after
/// binarising at `threshold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrfReport {
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub op: f64,
    pub or_: f64,
    pub of1: f64,
    /// Entries like `label3/precision` that hit the 0-convention.
    pub undefined: Vec<String>,
}

pub fn multilabel_prf(scores: &[Vec<f64>], truth: &[Vec<u8>], threshold: f64) -> Result<PrfReport> {
    if scores.len() != truth.len() || scores.is_empty() {
        return Err(Error::Shape("scores/truth row mismatch or empty".into()));
    }
    let k = scores[0].len();
    if k == 0 || truth.iter().zip(scores).any(|(t, s)| t.len() != k || s.len() != k) {
        return Err(Error::Shape("ragged score/truth matrix".into()));
    }
    let mut undefined = Vec::new();
    let (mut tp_all, mut fp_all, mut fn_all) = (0usize, 0usize, 0usize);
    let (mut cp_sum, mut cr_sum, mut cf1_sum) = (0.0, 0.0, 0.0);
    for label in 0..k {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (srow, trow) in scores.iter().zip(truth) {
            let pred = srow[label] >= threshold;
            let pos = trow[label] == 1;
            match (pred, pos) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let precision = if tp + fp == 0 {
            undefined.push(format!("label{label}/precision"));
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fn_ == 0 {
            undefined.push(format!("label{label}/recall"));
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        cp_sum += precision;
        cr_sum += recall;
        cf1_sum += f1;
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
    }
    let op = if tp_all + fp_all == 0 {
        undefined.push("overall/precision".into());
        0.0
    } else {
        tp_all as f64 / (tp_all + fp_all) as f64
    };
    let or_ = if tp_all + fn_all == 0 {
        undefined.push("overall/recall".into());
        0.0
    } else {
        tp_all as f64 / (tp_all + fn_all) as f64
    };
    let of1 = if op + or_ == 0.0 { 0.0 } else { 2.0 * op * or_ / (op + or_) };
    Ok(PrfReport {
        cp: cp_sum / k as f64,
        cr: cr_sum / k as f64,
        // CF1 is the mean of per-label F1 values, not the F1 of (CP, CR).
        cf1: cf1_sum / k as f64,
        op,
        or_,
        of1,
        undefined,
    })
}

/// Overlap 2|A∩B| / (|A| + |B|) for one class id; empty-empty counts as 1.
pub fn dice(pred: &SegMask, gt: &SegMask, class_id: u8) -> Result<f64> {
    if pred.classes.shape() != gt.classes.shape() {
        return Err(Error::Shape(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.classes.shape(),
            gt.classes.shape()
        )));
    }
    let mut a = 0usize;
    let mut b = 0usize;
    let mut inter = 0usize;
    for (p, g) in pred.classes.iter().zip(gt.classes.iter()) {
        let pa = *p == class_id;
        let gb = *g == class_id;
        a += pa as usize;
        b += gb as usize;
        inter += (pa && gb) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// One-sided paired sign-flip permutation test on the mean difference.
/// Exact enumeration when `2^n <= n_resamples`, else seeded Monte-Carlo with
/// the observed assignment included, so p is never 0.
pub fn permutation_test(diffs: &[f64], n_resamples: usize, seed: u64) -> Result<f64> {
    if diffs.is_empty() {
        return Err(Error::Validation("permutation test needs at least one difference".into()));
    }
    let n = diffs.len();
    let observed: f64 = diffs.iter().sum::<f64>() / n as f64;
    let scale = diffs.iter().map(|d| d.abs()).fold(0.0, f64::max).max(1e-300);
    let tol = 1e-12 * scale;
    if n < 64 && (1usize << n) <= n_resamples {
        let total = 1usize << n;
        let mut count = 0usize;
        for mask in 0..total {
            let mut sum = 0.0;
            for (i, d) in diffs.iter().enumerate() {
                sum += if mask >> i & 1 == 1 { -d } else { *d };
            }
            if sum / n as f64 >= observed - tol {
                count += 1;
            }
        }
        Ok(count as f64 / total as f64)
    } else {
        let mut rng = util::stream(seed, "perm-test");
        let mut count = 0usize;
        for _ in 0..n_resamples {
            let mut sum = 0.0;
            for d in diffs {
                sum += if rng.random::<bool>() { -d } else { *d };
            }
            if sum / n as f64 >= observed - tol {
                count += 1;
            }
        }
        Ok((count + 1) as f64 / (n_resamples + 1) as f64)
    }
}

/// Full classification/segmentation report for one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub threshold: f64,
    pub per_label_auroc: Vec<Option<f64>>,
    pub per_label_ap: Vec<Option<f64>>,
    pub macro_auroc: Option<f64>,
    /// Labels excluded from the macro average (undefined AUROC), flagged.
    pub excluded_labels: Vec<usize>,
    pub prf: PrfReport,
    pub dice_per_class: Option<Vec<f64>>,
    pub mean_dice: Option<f64>,
}

impl MetricReport {
    /// Build the classification part from per-sample score/truth matrices.
    pub fn from_scores(scores: &[Vec<f64>], truth: &[Vec<u8>], threshold: f64) -> Result<MetricReport> {
        let k = scores.first().map(|r| r.len()).unwrap_or(0);
        let mut per_label_auroc = Vec::with_capacity(k);
        let mut per_label_ap = Vec::with_capacity(k);
        for label in 0..k {
            let s = ScoredLabels::new(
                scores.iter().map(|r| r[label]).collect(),
                truth.iter().map(|r| r[label]).collect(),
            )?;
            per_label_auroc.push(auroc(&s));
            per_label_ap.push(average_precision(&s));
        }
        let (macro_auroc, excluded_labels) = macro_auroc(&per_label_auroc);
        let prf = multilabel_prf(scores, truth, threshold)?;
        Ok(MetricReport {
            threshold,
            per_label_auroc,
            per_label_ap,
            macro_auroc,
            excluded_labels,
            prf,
            dice_per_class: None,
            mean_dice: None,
        })
    }

    pub fn with_dice(mut self, per_class: Vec<f64>) -> Self {
        let mean = per_class.iter().sum::<f64>() / per_class.len().max(1) as f64;
        self.dice_per_class = Some(per_class);
        self.mean_dice = Some(mean);
        self
    }

    /// Flat `label,metric,value,flag` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,metric,value,flag\n");
        let fmt = |v: Option<f64>| match v {
            Some(v) => (format!("{v}"), ""),
            None => (String::new(), "undefined"),
        };
        for (i, v) in self.per_label_auroc.iter().enumerate() {
            let (val, flag) = fmt(*v);
            out.push_str(&format!("label{i},auroc,{val},{flag}\n"));
        }
        for (i, v) in self.per_label_ap.iter().enumerate() {
            let (val, flag) = fmt(*v);
            out.push_str(&format!("label{i},ap,{val},{flag}\n"));
        }
        let (val, flag) = fmt(self.macro_auroc);
        out.push_str(&format!("macro,auroc,{val},{flag}\n"));
        for (name, v) in [
            ("cp", self.prf.cp),
            ("cr", self.prf.cr),
            ("cf1", self.prf.cf1),
            ("op", self.prf.op),
            ("or", self.prf.or_),
            ("of1", self.prf.of1),
        ] {
            let flag = if self.prf.undefined.iter().any(|u| u.starts_with("overall") && name.starts_with('o')) {
                "zero-convention"
            } else {
                ""
            };
            out.push_str(&format!("overall,{name},{v},{flag}\n"));
        }
        if let Some(per_class) = &self.dice_per_class {
            for (i, v) in per_class.iter().enumerate() {
                out.push_str(&format!("class{},dice,{v},\n", i + 1));
            }
            out.push_str(&format!("mean,dice,{},\n", self.mean_dice.unwrap()));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    // ---- independent oracles ----

    /// O(n^2) pairwise-counting AUROC.
    fn auroc_pairwise_oracle(scores: &[f64], truth: &[u8]) -> Option<f64> {
        let pos: Vec<f64> = scores.iter().zip(truth).filter(|(_, t)| **t == 1).map(|(s, _)| *s).collect();
        let neg: Vec<f64> = scores.iter().zip(truth).filter(|(_, t)| **t == 0).map(|(s, _)| *s).collect();
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let mut acc = 0.0;
        for p in &pos {
            for n in &neg {
                acc += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        Some(acc / (pos.len() * neg.len()) as f64)
    }

    /// AP by brute-force evaluation at every distinct threshold.
    fn ap_threshold_oracle(scores: &[f64], truth: &[u8]) -> Option<f64> {
        let n_pos = truth.iter().filter(|t| **t == 1).count();
        if n_pos == 0 {
            return None;
        }
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for th in thresholds {
            let mut tp = 0usize;
            let mut fp = 0usize;
            for (s, t) in scores.iter().zip(truth) {
                if *s >= th {
                    if *t == 1 {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            let recall = tp as f64 / n_pos as f64;
            let precision = tp as f64 / (tp + fp) as f64;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        Some(ap)
    }

    fn random_case(seed: u64, n: usize, tie_prone: bool) -> (Vec<f64>, Vec<u8>) {
        let mut rng = util::stream(seed, "metric-case");
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let v = rng.random::<f64>();
                if tie_prone { (v * 4.0).round() / 4.0 } else { v }
            })
            .collect();
        let truth: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<f64>() < 0.5)).collect();
        (scores, truth)
    }

    #[test]
    fn auroc_trivial_cases() {
        let perfect = ScoredLabels::new(vec![0.9, 0.1], vec![1, 0]).unwrap();
        assert_eq!(auroc(&perfect), Some(1.0));
        let ties = ScoredLabels::new(vec![0.5, 0.5, 0.5, 0.5], vec![1, 0, 1, 0]).unwrap();
        assert_eq!(auroc(&ties), Some(0.5));
        let single = ScoredLabels::new(vec![0.5, 0.6], vec![1, 1]).unwrap();
        assert_eq!(auroc(&single), None);
    }

    #[test]
    fn auroc_hand_derived_pairwise_value() {
        // truth (1,0,1,0) with scores (0.8,0.7,0.6,0.5): 3 of 4 pairs ordered.
        let s = ScoredLabels::new(vec![0.8, 0.7, 0.6, 0.5], vec![1, 0, 1, 0]).unwrap();
        assert_eq!(auroc(&s), Some(0.75));
    }

    #[test]
    fn auroc_matches_pairwise_oracle_exactly() {
        for seed in 0..200 {
            let n = 2 + (seed as usize % 11);
            let (scores, truth) = random_case(seed, n, seed % 3 == 0);
            let got = auroc(&ScoredLabels::new(scores.clone(), truth.clone()).unwrap());
            let want = auroc_pairwise_oracle(&scores, &truth);
            match (got, want) {
                (None, None) => {}
                (Some(g), Some(w)) => assert_eq!(g, w, "seed {seed}"),
                other => panic!("disagreement on definedness: {other:?}"),
            }
        }
    }

    #[test]
    fn auroc_invariant_under_monotone_transforms() {
        for seed in 300..340 {
            let (scores, truth) = random_case(seed, 10, seed % 2 == 0);
            let base = auroc(&ScoredLabels::new(scores.clone(), truth.clone()).unwrap());
            let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s - 1.0).tanh()).collect();
            let shifted: Vec<f64> = scores.iter().map(|s| 10.0 * s + 5.0).collect();
            assert_eq!(base, auroc(&ScoredLabels::new(squashed, truth.clone()).unwrap()));
            assert_eq!(base, auroc(&ScoredLabels::new(shifted, truth).unwrap()));
        }
    }

    #[test]
    fn ap_trivial_and_hand_cases() {
        let top = ScoredLabels::new(vec![0.9, 0.1], vec![1, 0]).unwrap();
        assert_eq!(average_precision(&top), Some(1.0));
        // Positive ranked second: precision at its recall step is 1/2.
        let second = ScoredLabels::new(vec![0.9, 0.1], vec![0, 1]).unwrap();
        assert_eq!(average_precision(&second), Some(0.5));
        let none = ScoredLabels::new(vec![0.9, 0.1], vec![0, 0]).unwrap();
        assert_eq!(average_precision(&none), None);
    }

    #[test]
    fn ap_matches_threshold_enumeration_oracle() {
        for seed in 500..700 {
            let n = 2 + (seed as usize % 9);
            let (scores, truth) = random_case(seed, n, seed % 2 == 0);
            let got = average_precision(&ScoredLabels::new(scores.clone(), truth.clone()).unwrap());
            let want = ap_threshold_oracle(&scores, &truth);
            match (got, want) {
                (None, None) => {}
                (Some(g), Some(w)) => assert!((g - w).abs() < 1e-12, "seed {seed}: {g} vs {w}"),
                other => panic!("disagreement on definedness: {other:?}"),
            }
        }
    }

    #[test]
    fn prf_perfect_predictions() {
        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        let truth = vec![vec![1, 0], vec![0, 1]];
        let r = multilabel_prf(&scores, &truth, 0.5).unwrap();
        for v in [r.cp, r.cr, r.cf1, r.op, r.or_, r.of1] {
            assert_eq!(v, 1.0);
        }
        assert!(r.undefined.is_empty());
    }

    #[test]
    fn prf_all_negative_predictions_flag_precision() {
        let scores = vec![vec![0.1, 0.2], vec![0.3, 0.0]];
        let truth = vec![vec![1, 0], vec![1, 1]];
        let r = multilabel_prf(&scores, &truth, 0.5).unwrap();
        assert_eq!(r.or_, 0.0);
        assert_eq!(r.op, 0.0);
        assert!(r.undefined.iter().any(|u| u == "overall/precision"));
    }

    #[test]
    fn prf_matches_hand_built_confusion_counts() {
        // label0: TP=2 FP=0 FN=0 -> P=1, R=1, F1=1.
        // label1: TP=1 FP=0 FN=2 -> P=1, R=1/3, F1=1/2.
        let scores = vec![vec![0.9, 0.9], vec![0.1, 0.2], vec![0.8, 0.3]];
        let truth = vec![vec![1, 1], vec![0, 1], vec![1, 1]];
        let r = multilabel_prf(&scores, &truth, 0.5).unwrap();
        assert_eq!(r.cp, 1.0);
        assert!((r.cr - (1.0 + 1.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((r.cf1 - 0.75).abs() < 1e-12);
        // micro: TP=3, FP=0, FN=2.
        assert_eq!(r.op, 1.0);
        assert_eq!(r.or_, 0.6);
        assert!((r.of1 - 0.75).abs() < 1e-12);
        // CF1 is mean-of-F1s (0.75), not F1 of (CP, CR) = 0.8.
        let f1_of_means = 2.0 * r.cp * r.cr / (r.cp + r.cr);
        assert!((r.cf1 - f1_of_means).abs() > 1e-3);
    }

    fn mask_of(values: Vec<u8>, shape: &[usize]) -> SegMask {
        SegMask { classes: ndarray::ArrayD::from_shape_vec(IxDyn(shape), values).unwrap() }
    }

    #[test]
    fn dice_cases() {
        let gt = mask_of(vec![1, 1, 0, 0], &[4]);
        assert_eq!(dice(&gt, &gt, 1).unwrap(), 1.0);
        // |A| = 2, |B| = 2, |A n B| = 1.
        let pred = mask_of(vec![0, 1, 1, 0], &[4]);
        assert_eq!(dice(&pred, &gt, 1).unwrap(), 0.5);
        // Both empty for class 3.
        assert_eq!(dice(&pred, &gt, 3).unwrap(), 1.0);
        // Symmetry.
        assert_eq!(dice(&pred, &gt, 1).unwrap(), dice(&gt, &pred, 1).unwrap());
        let bad = mask_of(vec![0, 0], &[2]);
        assert!(dice(&bad, &gt, 1).is_err());
    }

    #[test]
    fn permutation_test_exact_enumeration() {
        // All-zero differences: every sign pattern ties the observed mean.
        assert_eq!(permutation_test(&[0.0, 0.0, 0.0], 1 << 20, 0).unwrap(), 1.0);
        // (+1,+1,+1): only the identity pattern reaches mean 1.
        assert_eq!(permutation_test(&[1.0, 1.0, 1.0], 1 << 20, 0).unwrap(), 1.0 / 8.0);
        // (+1,-1): patterns (+,-), (-,+) tie at 0 and (+,+) exceeds it.
        assert_eq!(permutation_test(&[1.0, -1.0], 1 << 20, 0).unwrap(), 0.75);
    }

    #[test]
    fn permutation_exact_and_monte_carlo_agree() {
        let mut rng = util::stream(77, "perm");
        let diffs: Vec<f64> = (0..10).map(|_| util::standard_normal(&mut rng) + 0.4).collect();
        let exact = permutation_test(&diffs, 1 << 12, 0).unwrap();
        let n_mc = 1000;
        // Force the Monte-Carlo path with a resample budget below 2^10.
        let mc = permutation_test(&diffs, n_mc, 123).unwrap();
        let se = (exact * (1.0 - exact) / n_mc as f64).sqrt();
        assert!((mc - exact).abs() <= 3.0 * se.max(1e-3), "exact {exact} vs mc {mc}");
    }

    #[test]
    fn macro_auroc_excludes_undefined_labels() {
        let (m, excluded) = macro_auroc(&[Some(0.9), None, Some(0.7)]);
        assert_eq!(m, Some(0.8));
        assert_eq!(excluded, vec![1]);
        let (m, excluded) = macro_auroc(&[None]);
        assert_eq!(m, None);
        assert_eq!(excluded, vec![0]);
    }

    #[test]
    fn report_serialises_with_flags() {
        let scores = vec![vec![0.9, 0.4], vec![0.2, 0.6]];
        let truth = vec![vec![1, 1], vec![0, 1]];
        let r = MetricReport::from_scores(&scores, &truth, 0.5).unwrap().with_dice(vec![0.8, 0.9]);
        assert_eq!(r.per_label_auroc[0], Some(1.0));
        assert_eq!(r.per_label_auroc[1], None);
        assert_eq!(r.excluded_labels, vec![1]);
        let csv = r.to_csv();
        assert!(csv.contains("label1,auroc,,undefined"));
        assert!(csv.contains("mean,dice,"));
        let json = serde_json::to_string(&r).unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
