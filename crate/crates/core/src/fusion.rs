//! Multi-plane fusion: feature-level strategies (concatenation, linear
//! projection, cross-attention) and label-level adaptive expert gating over
//! per-orientation logits.

use std::fmt;

use ndarray::{Array2, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{multi_head_attention, Arr, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, ParamBinding, ParamSet};
use crate::volume::Orientation;

pub const CROSS_ATTENTION_HEADS: usize = 4;
pub const GATE_HIDDEN: usize = 16;
pub const GATE_DROPOUT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    SimpleConcat,
    LinearAdd,
    LinearConcat,
    CrossAttention,
    Mpae,
}

impl FusionStrategy {
    /// Fused dimensionality for per-orientation embeddings of length `c` and
    /// shared latent size `e`.
    pub fn fused_dim(&self, c: usize, e: usize) -> usize {
        match self {
            FusionStrategy::SimpleConcat => 3 * c,
            FusionStrategy::LinearAdd => e,
            FusionStrategy::LinearConcat | FusionStrategy::CrossAttention => 3 * e,
            FusionStrategy::Mpae => 0,
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionStrategy::SimpleConcat => "simple_concat",
            FusionStrategy::LinearAdd => "linear_add",
            FusionStrategy::LinearConcat => "linear_concat",
            FusionStrategy::CrossAttention => "cross_attention",
            FusionStrategy::Mpae => "mpae",
        })
    }
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple_concat" | "concat" => Ok(FusionStrategy::SimpleConcat),
            "linear_add" => Ok(FusionStrategy::LinearAdd),
            "linear_concat" => Ok(FusionStrategy::LinearConcat),
            "cross_attention" | "xattn" => Ok(FusionStrategy::CrossAttention),
            "mpae" => Ok(FusionStrategy::Mpae),
            other => Err(Error::Validation(format!("unknown fusion strategy {other:?}"))),
        }
    }
}

/// Initialise feature-level fusion parameters for embeddings of length `c`
/// projected into a shared space of size `e`.
pub fn init_fusion_params(strategy: FusionStrategy, c: usize, e: usize, seed: u64) -> Result<ParamSet> {
    let mut rng = crate::util::stream(seed, "fusion-init");
    let mut p = ParamSet::new();
    match strategy {
        FusionStrategy::SimpleConcat | FusionStrategy::Mpae => {}
        FusionStrategy::LinearAdd | FusionStrategy::LinearConcat => {
            for o in Orientation::ALL {
                p.insert(&format!("fuse/proj/{}/w", o.short()), nn::init_fan_in(&[c, e], c, &mut rng));
            }
        }
        FusionStrategy::CrossAttention => {
            if e % CROSS_ATTENTION_HEADS != 0 {
                return Err(Error::Config(format!(
                    "shared dim {e} not divisible by {CROSS_ATTENTION_HEADS} attention heads"
                )));
            }
            for o in Orientation::ALL {
                p.insert(&format!("fuse/proj/{}/w", o.short()), nn::init_fan_in(&[c, e], c, &mut rng));
            }
            for name in ["q", "k", "v"] {
                p.insert(&format!("fuse/xattn/{name}/w"), nn::init_fan_in(&[e, e], e, &mut rng));
            }
            p.insert("fuse/xattn/o/w", nn::init_fan_in(&[e, e], e, &mut rng));
            p.insert("fuse/ln/g", nn::ones(&[e]));
            p.insert("fuse/ln/b", nn::zeros(&[e]));
        }
    }
    Ok(p)
}

/// Fixed-order concatenation [sag || cor || ax].
pub fn simple_concat(tape: &mut Tape, embeds: [Var; 3]) -> Var {
    let c = tape.shape(embeds[0])[1];
    for e in &embeds[1..] {
        assert_eq!(tape.shape(*e)[1], c, "embedding lengths disagree");
    }
    tape.concat(&embeds, 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinearMode {
    Add,
    Concat,
}

/// Project each orientation into the shared space, then add or concatenate.
pub fn linear_fuse(tape: &mut Tape, binding: &ParamBinding, embeds: [Var; 3], mode: LinearMode) -> Var {
    let mut projected = Vec::with_capacity(3);
    for (o, e) in Orientation::ALL.into_iter().zip(embeds) {
        projected.push(tape.matmul(e, binding.var(&format!("fuse/proj/{}/w", o.short()))));
    }
    match mode {
        LinearMode::Add => {
            let s = tape.add(projected[0], projected[1]);
            tape.add(s, projected[2])
        }
        LinearMode::Concat => tape.concat(&projected, 1),
    }
}

/// Cyclic partner for cross-attention queries: sag->cor, cor->ax, ax->sag.
pub fn cross_attention_partner(o: Orientation) -> Orientation {
    match o {
        Orientation::Sagittal => Orientation::Coronal,
        Orientation::Coronal => Orientation::Axial,
        Orientation::Axial => Orientation::Sagittal,
    }
}

/// Each projected embedding queries its cyclic partner; residual + layer norm
/// then concatenation. Attention projections are shared across the pairings.
pub fn cross_attention_fuse(tape: &mut Tape, binding: &ParamBinding, embeds: [Var; 3]) -> Var {
    let mut projected = [None; 3];
    for (o, e) in Orientation::ALL.into_iter().zip(embeds) {
        projected[o.index()] = Some(tape.matmul(e, binding.var(&format!("fuse/proj/{}/w", o.short()))));
    }
    let projected = projected.map(|p| p.unwrap());
    let e_dim = tape.shape(projected[0])[1];
    let mut refined = Vec::with_capacity(3);
    for o in Orientation::ALL {
        let h = projected[o.index()];
        let partner = projected[cross_attention_partner(o).index()];
        let attended = multi_head_attention(
            tape,
            h,
            partner,
            binding.var("fuse/xattn/q/w"),
            binding.var("fuse/xattn/k/w"),
            binding.var("fuse/xattn/v/w"),
            binding.var("fuse/xattn/o/w"),
            CROSS_ATTENTION_HEADS.min(e_dim),
        );
        let residual = tape.add(h, attended);
        refined.push(tape.layer_norm_rows(residual, binding.var("fuse/ln/g"), binding.var("fuse/ln/b"), 1e-5));
    }
    tape.concat(&refined, 1)
}

// ---- label-level fusion (adaptive experts) ----

/// Per-orientation K-dim logit vectors for one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertLogits {
    /// Rows ordered (sagittal, coronal, axial).
    pub z: [Vec<f64>; 3],
    pub patient_id: String,
}

impl ExpertLogits {
    pub fn n_labels(&self) -> usize {
        self.z[0].len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_labels();
        if self.z.iter().any(|row| row.len() != k) {
            return Err(Error::Shape("expert logit rows have unequal lengths".into()));
        }
        if self.z.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite expert logits for {}", self.patient_id)));
        }
        Ok(())
    }

    /// Per-label column (sag, cor, ax).
    pub fn label_column(&self, k: usize) -> [f64; 3] {
        [self.z[0][k], self.z[1][k], self.z[2][k]]
    }
}

/// Per-label orientation weights on the 3-simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct GateWeights {
    /// `alpha[k]` = (sag, cor, ax), nonnegative, summing to 1.
    pub alpha: Vec<[f64; 3]>,
}

impl GateWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, a) in self.alpha.iter().enumerate() {
            if a.iter().any(|v| *v < 0.0) || (a.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(Error::Validation(format!("gate weights for label {k} leave the simplex: {a:?}")));
            }
        }
        Ok(())
    }
}

/// Per-label gating MLPs (3 -> 16 -> 3) with ReLU hidden activation.
pub fn init_gate_params(n_labels: usize, seed: u64) -> ParamSet {
    let mut rng = crate::util::stream(seed, "gate-init");
    let mut p = ParamSet::new();
    for k in 0..n_labels {
        p.insert(&format!("gate/l{k}/fc1/w"), nn::init_fan_in(&[3, GATE_HIDDEN], 3, &mut rng));
        p.insert(&format!("gate/l{k}/fc1/b"), nn::zeros(&[GATE_HIDDEN]));
        p.insert(&format!("gate/l{k}/fc2/w"), nn::init_fan_in(&[GATE_HIDDEN, 3], GATE_HIDDEN, &mut rng));
        p.insert(&format!("gate/l{k}/fc2/b"), nn::zeros(&[3]));
    }
    p
}

/// Gate scores for one label column on the tape; softmax happens downstream.
fn gate_scores(tape: &mut Tape, binding: &ParamBinding, label: usize, z_k: Var, dropout_mask: Option<&Arr>) -> Var {
    let h = tape.matmul(z_k, binding.var(&format!("gate/l{label}/fc1/w")));
    let h = tape.add_row_bias(h, binding.var(&format!("gate/l{label}/fc1/b")));
    let h = tape.relu(h);
    let h = match dropout_mask {
        Some(mask) => tape.mul_const(h, mask.clone()),
        None => h,
    };
    let s = tape.matmul(h, binding.var(&format!("gate/l{label}/fc2/w")));
    tape.add_row_bias(s, binding.var(&format!("gate/l{label}/fc2/b")))
}

/// Fused logits for one patient on the tape: per-label softmax gate over the
/// three expert logits, then the convex combination. Returns (fused (1, K),
/// per-label alpha rows).
pub fn mpae_on_tape(
    tape: &mut Tape,
    binding: &ParamBinding,
    experts: &ExpertLogits,
    dropout_masks: Option<&[Arr]>,
) -> (Var, Vec<Var>) {
    let k = experts.n_labels();
    let mut fused = Vec::with_capacity(k);
    let mut alphas = Vec::with_capacity(k);
    for label in 0..k {
        let col = experts.label_column(label);
        let z_k = tape.leaf(Arr::from_shape_vec(IxDyn(&[1, 3]), col.to_vec()).unwrap());
        let mask = dropout_masks.map(|m| &m[label]);
        let scores = gate_scores(tape, binding, label, z_k, mask);
        let alpha = tape.softmax_rows(scores);
        alphas.push(alpha);
        let zc = tape.transpose2(z_k);
        fused.push(tape.matmul(alpha, zc));
    }
    (tape.concat(&fused, 1), alphas)
}

/// Evaluation-mode gate weights (dropout inactive).
pub fn mpae_gate(experts: &ExpertLogits, gate_params: &ParamSet) -> Result<GateWeights> {
    experts.validate()?;
    let mut tape = Tape::eval_only();
    let binding = gate_params.bind(&mut tape);
    let (_, alphas) = mpae_on_tape(&mut tape, &binding, experts, None);
    let alpha = alphas
        .iter()
        .map(|a| {
            let v = tape.value(*a);
            [v[IxDyn(&[0, 0])], v[IxDyn(&[0, 1])], v[IxDyn(&[0, 2])]]
        })
        .collect();
    let gw = GateWeights { alpha };
    gw.validate()?;
    Ok(gw)
}

/// Per-label convex combination of the three expert logits.
pub fn mpae_fuse(experts: &ExpertLogits, alpha: &GateWeights) -> Result<Vec<f64>> {
    experts.validate()?;
    alpha.validate()?;
    if alpha.alpha.len() != experts.n_labels() {
        return Err(Error::Shape(format!(
            "gate weights cover {} labels, experts have {}",
            alpha.alpha.len(),
            experts.n_labels()
        )));
    }
    Ok((0..experts.n_labels())
        .map(|k| {
            let col = experts.label_column(k);
            let a = alpha.alpha[k];
            a[0] * col[0] + a[1] * col[1] + a[2] * col[2]
        })
        .collect())
}

/// Rows of the gate-weight export: `patient_id,label,alpha_sag,alpha_cor,alpha_ax`.
pub const GATE_CSV_HEADER: &str = "patient_id,label,alpha_sag,alpha_cor,alpha_ax";

pub fn gate_weights_csv(rows: &[(String, GateWeights)]) -> String {
    let mut out = String::from(GATE_CSV_HEADER);
    out.push('\n');
    for (pid, gw) in rows {
        for (k, a) in gw.alpha.iter().enumerate() {
            out.push_str(&format!("{pid},{k},{},{},{}\n", a[0], a[1], a[2]));
        }
    }
    out
}

/// Pure helper mirroring the tape path for a single embedding triple.
pub fn fuse_embeddings(
    strategy: FusionStrategy,
    params: &ParamSet,
    embeds: [&[f64]; 3],
) -> Result<Vec<f64>> {
    let mut tape = Tape::eval_only();
    let binding = params.bind(&mut tape);
    let vars = embeds.map(|e| {
        let arr = Array2::from_shape_vec((1, e.len()), e.to_vec()).unwrap();
        tape.leaf(arr.into_dyn())
    });
    let out = match strategy {
        FusionStrategy::SimpleConcat => simple_concat(&mut tape, vars),
        FusionStrategy::LinearAdd => linear_fuse(&mut tape, &binding, vars, LinearMode::Add),
        FusionStrategy::LinearConcat => linear_fuse(&mut tape, &binding, vars, LinearMode::Concat),
        FusionStrategy::CrossAttention => cross_attention_fuse(&mut tape, &binding, vars),
        FusionStrategy::Mpae => {
            return Err(Error::Config("label-level fusion has no feature-space output".into()))
        }
    };
    Ok(tape.value(out).iter().copied().collect())
}
