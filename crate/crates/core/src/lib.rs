//! Orientation-specific volumetric diffusion pretraining with multi-plane
//! fusion, evaluated end to end on synthetic phantom studies.
//!
//! The crate is organised along the pipeline:
//!
//! - [`synth`] / [`dataset`]: phantom study generation, preprocessing, and
//!   leakage-free patient-level indices.
//! - [`diffusion`]: noise schedule, 3D U-Net denoiser, self-supervised
//!   pretraining, and checkpointing.
//! - [`features`] / [`pooling`]: intermediate-activation taps and the
//!   GAP/GLP/SAP pooling operators.
//! - [`fusion`] / [`ehr`]: multi-plane feature and logit fusion, plus EHR
//!   encoding and logit-level late fusion.
//! - [`train`]: classifier and segmentation heads, the two-stage training
//!   protocol, tap selection, and the label-efficiency harness.
//! - [`metrics`]: AUROC / AP / PRF / Dice and the sign-flip permutation test.
//! - [`pipeline`] / [`config`] / [`manifest`]: reproducible staged runs behind
//!   the CLI.

pub mod autodiff;
pub mod dataset;
pub mod diffusion;
pub mod ehr;
pub mod error;
pub mod exec;
pub mod features;
pub mod fusion;
pub mod metrics;
pub mod nn;
pub mod pooling;
pub mod synth;
pub mod util;
pub mod volume;

pub use error::{Error, Result};
