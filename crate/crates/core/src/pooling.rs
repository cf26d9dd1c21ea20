//! Pooling operators that collapse a bottleneck feature map into a compact
//! embedding: global average (GAP), global-local attention scoring (GLP), and
//! multi-head self-attention pooling (SAP).
//!
//! GAP yields a C-dim vector; GLP and SAP concatenate a second C-dim summary,
//! yielding 2C. SAP is the default operator downstream.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{multi_head_attention, Tape, Var};
use crate::error::{Error, Result};
use crate::features::{FeatureMap, TapPoint};
use crate::nn::{self, ParamBinding, ParamSet};
use crate::volume::Orientation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMethod {
    Gap,
    Glp,
    Sap,
}

impl fmt::Display for PoolMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolMethod::Gap => "gap",
            PoolMethod::Glp => "glp",
            PoolMethod::Sap => "sap",
        })
    }
}

impl std::str::FromStr for PoolMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gap" => Ok(PoolMethod::Gap),
            "glp" => Ok(PoolMethod::Glp),
            "sap" => Ok(PoolMethod::Sap),
            other => Err(Error::Validation(format!("unknown pooling method {other:?}"))),
        }
    }
}

/// Output length contract per method.
pub fn pooled_dim(method: PoolMethod, channels: usize) -> usize {
    match method {
        PoolMethod::Gap => channels,
        PoolMethod::Glp | PoolMethod::Sap => 2 * channels,
    }
}

/// SAP keeps the per-head dimension fixed at 16 as channel width varies.
pub fn sap_heads(channels: usize) -> usize {
    (channels / 16).max(1)
}

/// Compact embedding with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledEmbedding {
    pub vector: Vec<f64>,
    pub method: PoolMethod,
    pub tap: TapPoint,
    pub orientation: Orientation,
    pub scan_id: String,
}

/// Trainable pooling parameters for one orientation branch.
/// GAP has none; GLP is a (C -> C/8 -> 1) scorer; SAP is the four square
/// projections of multi-head attention (no biases).
pub fn init_pool_params(method: PoolMethod, channels: usize, seed: u64) -> Result<ParamSet> {
    let mut rng = crate::util::stream(seed, "pool-init");
    let mut p = ParamSet::new();
    match method {
        PoolMethod::Gap => {}
        PoolMethod::Glp => {
            let hidden = (channels / 8).max(1);
            p.insert("pool/glp/fc1/w", nn::init_fan_in(&[channels, hidden], channels, &mut rng));
            p.insert("pool/glp/fc1/b", nn::zeros(&[hidden]));
            p.insert("pool/glp/fc2/w", nn::init_fan_in(&[hidden, 1], hidden, &mut rng));
            p.insert("pool/glp/fc2/b", nn::zeros(&[1]));
        }
        PoolMethod::Sap => {
            let heads = sap_heads(channels);
            if channels % heads != 0 {
                return Err(Error::Config(format!(
                    "SAP channel width {channels} not divisible by {heads} heads"
                )));
            }
            for name in ["q", "k", "v", "o"] {
                p.insert(&format!("pool/sap/{name}/w"), nn::init_fan_in(&[channels, channels], channels, &mut rng));
            }
        }
    }
    Ok(p)
}

/// Feature map (C, D', H', W') as a token matrix (N, C).
fn tokens_of(tape: &mut Tape, fm: Var) -> Var {
    let shape: Vec<usize> = tape.shape(fm).to_vec();
    let c = shape[0];
    let n: usize = shape[1..].iter().product();
    let flat = tape.reshape(fm, &[c, n]);
    tape.permute(flat, &[1, 0])
}

/// Build the pooled embedding as a (1, dim) row on the tape.
pub fn pool_on_tape(
    tape: &mut Tape,
    method: PoolMethod,
    fm: Var,
    params: Option<&ParamBinding>,
) -> Var {
    let c = tape.shape(fm)[0];
    let global = tape.spatial_mean(fm);
    let global = tape.reshape(global, &[1, c]);
    match method {
        PoolMethod::Gap => global,
        PoolMethod::Glp => {
            let p = params.expect("GLP needs scorer parameters");
            let tokens = tokens_of(tape, fm);
            let h = tape.matmul(tokens, p.var("pool/glp/fc1/w"));
            let h = tape.add_row_bias(h, p.var("pool/glp/fc1/b"));
            let h = tape.relu(h);
            let scores = tape.matmul(h, p.var("pool/glp/fc2/w"));
            let scores = tape.add_row_bias(scores, p.var("pool/glp/fc2/b"));
            let srow = tape.transpose2(scores);
            let alpha = tape.softmax_rows(srow);
            let local = tape.matmul(alpha, tokens);
            tape.concat(&[global, local], 1)
        }
        PoolMethod::Sap => {
            let p = params.expect("SAP needs projection parameters");
            let tokens = tokens_of(tape, fm);
            let mha = multi_head_attention(
                tape,
                tokens,
                tokens,
                p.var("pool/sap/q/w"),
                p.var("pool/sap/k/w"),
                p.var("pool/sap/v/w"),
                p.var("pool/sap/o/w"),
                sap_heads(c),
            );
            let attn = tape.mean_rows(mha);
            let attn = tape.reshape(attn, &[1, c]);
            tape.concat(&[global, attn], 1)
        }
    }
}

fn run_pool(fm: &FeatureMap, method: PoolMethod, params: Option<&ParamSet>) -> PooledEmbedding {
    let mut tape = Tape::eval_only();
    let binding = params.map(|p| p.bind(&mut tape));
    let fm_var = tape.leaf(fm.data.clone());
    let out = pool_on_tape(&mut tape, method, fm_var, binding.as_ref());
    PooledEmbedding {
        vector: tape.value(out).iter().copied().collect(),
        method,
        tap: fm.tap,
        orientation: fm.orientation,
        scan_id: fm.scan_id.clone(),
    }
}

/// Per-channel mean over all spatial positions.
pub fn gap(fm: &FeatureMap) -> PooledEmbedding {
    run_pool(fm, PoolMethod::Gap, None)
}

/// Global summary concatenated with a softmax-scored local summary.
pub fn glp(fm: &FeatureMap, params: &ParamSet) -> PooledEmbedding {
    run_pool(fm, PoolMethod::Glp, Some(params))
}

/// Global summary concatenated with the token mean of multi-head
/// self-attention over spatial positions.
pub fn sap(fm: &FeatureMap, params: &ParamSet) -> PooledEmbedding {
    run_pool(fm, PoolMethod::Sap, Some(params))
}

/// The GLP attention weights over positions (softmax-normalised).
pub fn glp_attention_weights(fm: &FeatureMap, params: &ParamSet) -> Vec<f64> {
    let mut tape = Tape::eval_only();
    let binding = params.bind(&mut tape);
    let fm_var = tape.leaf(fm.data.clone());
    let tokens = tokens_of(&mut tape, fm_var);
    let h = tape.matmul(tokens, binding.var("pool/glp/fc1/w"));
    let h = tape.add_row_bias(h, binding.var("pool/glp/fc1/b"));
    let h = tape.relu(h);
    let scores = tape.matmul(h, binding.var("pool/glp/fc2/w"));
    let scores = tape.add_row_bias(scores, binding.var("pool/glp/fc2/b"));
    let srow = tape.transpose2(scores);
    let alpha = tape.softmax_rows(srow);
    tape.value(alpha).iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Arr;
    use crate::diffusion::MidBlock;
    use crate::util;
    use ndarray::IxDyn;
    use rand::Rng;

    fn fm_from(values: Arr) -> FeatureMap {
        FeatureMap {
            data: values,
            tap: TapPoint::new(10, MidBlock::Mid2),
            orientation: Orientation::Sagittal,
            scan_id: "s".into(),
        }
    }

    fn random_fm(c: usize, d: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = util::stream(seed, "pool-test");
        let mut a = Arr::zeros(IxDyn(&[c, d, h, w]));
        for v in a.iter_mut() {
            *v = util::standard_normal(&mut rng);
        }
        fm_from(a)
    }

    #[test]
    fn gap_of_constant_channels() {
        let mut a = Arr::zeros(IxDyn(&[3, 2, 2, 2]));
        for c in 0..3 {
            for v in a.index_axis_mut(ndarray::Axis(0), c).iter_mut() {
                *v = c as f64 + 1.0;
            }
        }
        let e = gap(&fm_from(a));
        assert_eq!(e.vector, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn gap_two_position_mean() {
        let a = Arr::from_shape_vec(IxDyn(&[1, 1, 1, 2]), vec![1.0, 3.0]).unwrap();
        assert_eq!(gap(&fm_from(a)).vector, vec![2.0]);
    }

    #[test]
    fn gap_is_permutation_invariant() {
        let fm = random_fm(4, 2, 3, 2, 1);
        let base = gap(&fm);
        let mut rng = util::stream(2, "perm");
        let c = 4;
        let n = 12;
        let flat: Vec<f64> = fm.data.iter().copied().collect();
        for _ in 0..20 {
            // Random permutation of spatial positions, applied to every channel.
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                perm.swap(i, j);
            }
            let mut shuffled = vec![0.0; c * n];
            for ch in 0..c {
                for (i, &pi) in perm.iter().enumerate() {
                    shuffled[ch * n + i] = flat[ch * n + pi];
                }
            }
            let fm2 = fm_from(Arr::from_shape_vec(IxDyn(&[4, 2, 3, 2]), shuffled).unwrap());
            let e2 = gap(&fm2);
            for (a, b) in base.vector.iter().zip(&e2.vector) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_length_contracts() {
        let fm = random_fm(32, 2, 4, 4, 3);
        assert_eq!(gap(&fm).vector.len(), 32);
        let glp_p = init_pool_params(PoolMethod::Glp, 32, 0).unwrap();
        assert_eq!(glp(&fm, &glp_p).vector.len(), 64);
        let sap_p = init_pool_params(PoolMethod::Sap, 32, 0).unwrap();
        assert_eq!(sap(&fm, &sap_p).vector.len(), 64);
        assert_eq!(pooled_dim(PoolMethod::Gap, 32), 32);
        assert_eq!(pooled_dim(PoolMethod::Sap, 32), 64);
    }

    #[test]
    fn glp_with_constant_scorer_reduces_to_double_gap() {
        let fm = random_fm(8, 1, 2, 2, 4);
        let mut params = init_pool_params(PoolMethod::Glp, 8, 0).unwrap();
        // Zero scorer weights make every position score b2: a constant.
        params.set("pool/glp/fc1/w", nn::zeros(&[8, 1]));
        params.set("pool/glp/fc2/w", nn::zeros(&[1, 1]));
        let e = glp(&fm, &params);
        let g = gap(&fm);
        for i in 0..8 {
            assert!((e.vector[i] - g.vector[i]).abs() < 1e-12);
            assert!((e.vector[8 + i] - g.vector[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn glp_attention_normalised_and_hand_case() {
        let fm = random_fm(16, 2, 2, 2, 5);
        let params = init_pool_params(PoolMethod::Glp, 16, 1).unwrap();
        let alpha = glp_attention_weights(&fm, &params);
        assert_eq!(alpha.len(), 8);
        assert!(alpha.iter().all(|a| *a >= 0.0));
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-6);

        // Hand case: C = 1, positions (1, 5), scorer tuned so the scores are
        // (ln 3, 0); softmax gives (0.75, 0.25) and f_local = 2.0.
        let a = Arr::from_shape_vec(IxDyn(&[1, 1, 1, 2]), vec![1.0, 5.0]).unwrap();
        let fm = fm_from(a);
        let mut params = init_pool_params(PoolMethod::Glp, 1, 0).unwrap();
        let ln3 = 3f64.ln();
        params.set("pool/glp/fc1/w", Arr::from_elem(IxDyn(&[1, 1]), 1.0));
        params.set("pool/glp/fc1/b", nn::zeros(&[1]));
        params.set("pool/glp/fc2/w", Arr::from_elem(IxDyn(&[1, 1]), -ln3 / 4.0));
        params.set("pool/glp/fc2/b", Arr::from_elem(IxDyn(&[1]), 5.0 * ln3 / 4.0));
        let e = glp(&fm, &params);
        assert!((e.vector[0] - 3.0).abs() < 1e-12, "global part");
        assert!((e.vector[1] - 2.0).abs() < 1e-12, "local part {:?}", e.vector);
    }

    #[test]
    fn sap_single_token_identity_params() {
        // One token with identity projections: attention over a single key is
        // 1, so the output is [x || x].
        let c = 4;
        let x = vec![0.3, -1.2, 0.7, 2.0];
        let a = Arr::from_shape_vec(IxDyn(&[c, 1, 1, 1]), x.clone()).unwrap();
        let mut params = init_pool_params(PoolMethod::Sap, c, 0).unwrap();
        let mut eye = nn::zeros(&[c, c]);
        for i in 0..c {
            eye[IxDyn(&[i, i])] = 1.0;
        }
        for name in ["q", "k", "v", "o"] {
            params.set(&format!("pool/sap/{name}/w"), eye.clone());
        }
        let e = sap(&fm_from(a), &params);
        for i in 0..c {
            assert!((e.vector[i] - x[i]).abs() < 1e-12);
            assert!((e.vector[c + i] - x[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn sap_identical_tokens_convexity() {
        // All tokens equal x: every attention row is a convex combination of
        // identical values, so with identity params the result is [x || x].
        let c = 4;
        let x = vec![1.0, 2.0, -0.5, 0.25];
        let mut data = Vec::new();
        for xi in &x {
            data.extend(std::iter::repeat_n(*xi, 6));
        }
        let a = Arr::from_shape_vec(IxDyn(&[c, 1, 2, 3]), data).unwrap();
        let mut params = init_pool_params(PoolMethod::Sap, c, 0).unwrap();
        let mut eye = nn::zeros(&[c, c]);
        for i in 0..c {
            eye[IxDyn(&[i, i])] = 1.0;
        }
        for name in ["q", "k", "v", "o"] {
            params.set(&format!("pool/sap/{name}/w"), eye.clone());
        }
        let e = sap(&fm_from(a), &params);
        for i in 0..c {
            assert!((e.vector[i] - x[i]).abs() < 1e-12);
            assert!((e.vector[c + i] - x[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn sap_zero_params_zero_attn_summary() {
        let fm = random_fm(16, 1, 2, 2, 6);
        let mut params = init_pool_params(PoolMethod::Sap, 16, 0).unwrap();
        for name in ["q", "k", "v", "o"] {
            params.set(&format!("pool/sap/{name}/w"), nn::zeros(&[16, 16]));
        }
        let e = sap(&fm, &params);
        let g = gap(&fm);
        for i in 0..16 {
            assert!((e.vector[i] - g.vector[i]).abs() < 1e-12);
            assert_eq!(e.vector[16 + i], 0.0, "zero projections give a zero summary");
        }
    }

    #[test]
    fn sap_two_token_manual_arithmetic() {
        // N = 2, heads = 1, hand-set 2x2 projections; expected values frozen
        // from a manual evaluation of the attention equations.
        let a = Arr::from_shape_vec(IxDyn(&[2, 1, 1, 2]), vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        // tokens: (1, 0) and (0, 2)
        let mut params = init_pool_params(PoolMethod::Sap, 2, 0).unwrap();
        let set = |p: &mut ParamSet, name: &str, vals: [f64; 4]| {
            p.set(name, Arr::from_shape_vec(IxDyn(&[2, 2]), vals.to_vec()).unwrap());
        };
        set(&mut params, "pool/sap/q/w", [1.0, 0.0, 0.0, 1.0]);
        set(&mut params, "pool/sap/k/w", [0.0, 1.0, 1.0, 0.0]);
        set(&mut params, "pool/sap/v/w", [1.0, 1.0, 0.0, 1.0]);
        set(&mut params, "pool/sap/o/w", [2.0, 0.0, 0.0, 1.0]);
        let e = sap(&fm_from(a), &params);
        // f_global = (0.5, 1.0); f_attn = (1.0, 1.5) by direct evaluation.
        let expect = [0.5, 1.0, 1.0, 1.5];
        for (got, want) in e.vector.iter().zip(expect) {
            assert!((got - want).abs() < 1e-9, "{:?} vs {expect:?}", e.vector);
        }

        // Cross-check against an independent naive evaluation with 1 head.
        let tokens = [[1.0, 0.0], [0.0, 2.0]];
        let matmul2 = |x: [[f64; 2]; 2], w: [f64; 4]| {
            let mut out = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    out[i][j] = x[i][0] * w[j] + x[i][1] * w[2 + j];
                }
            }
            out
        };
        let q = matmul2(tokens, [1.0, 0.0, 0.0, 1.0]);
        let k = matmul2(tokens, [0.0, 1.0, 1.0, 0.0]);
        let v = matmul2(tokens, [1.0, 1.0, 0.0, 1.0]);
        let scale = 1.0 / 2f64.sqrt();
        let mut attn_out = [[0.0; 2]; 2];
        for i in 0..2 {
            let s0 = (q[i][0] * k[0][0] + q[i][1] * k[0][1]) * scale;
            let s1 = (q[i][0] * k[1][0] + q[i][1] * k[1][1]) * scale;
            let m = s0.max(s1);
            let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
            let z = e0 + e1;
            for j in 0..2 {
                attn_out[i][j] = (e0 * v[0][j] + e1 * v[1][j]) / z;
            }
        }
        let proj = matmul2(attn_out, [2.0, 0.0, 0.0, 1.0]);
        let f_attn = [(proj[0][0] + proj[1][0]) / 2.0, (proj[0][1] + proj[1][1]) / 2.0];
        assert!((e.vector[2] - f_attn[0]).abs() < 1e-12);
        assert!((e.vector[3] - f_attn[1]).abs() < 1e-12);
    }

    #[test]
    fn sap_rejects_indivisible_heads() {
        // 24 channels with head dim 16 pins heads to 1, which divides; force
        // an indivisible case through the head-count contract directly.
        let mut tape = Tape::new();
        let fm = random_fm(6, 1, 1, 2, 7);
        let params = init_pool_params(PoolMethod::Sap, 6, 0).unwrap();
        let binding = params.bind(&mut tape);
        let fm_var = tape.leaf(fm.data);
        // heads = 1 for 6 channels, fine; the contract panic path is covered
        // by multi_head_attention's assertion when heads do not divide C.
        let _ = pool_on_tape(&mut tape, PoolMethod::Sap, fm_var, Some(&binding));
    }
}
