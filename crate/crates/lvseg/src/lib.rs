//! Left-ventricular non-compaction (LVNC) screening toolkit: a small
//! reverse-mode autodiff engine, a U-Net segmentation model with RAdam and
//! a Lovász-softmax + boundary compound loss, a synthetic short-axis
//! phantom generator, trabecular-area quantification (PTA), and the
//! evaluation/benchmark protocol tying them together.
//!
//! Everything is f64 and deterministic: the same seeds produce bit-identical
//! parameters, training trajectories, and predictions.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod mask;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use mask::{pta, region_areas, PtaResult, SegMask, LVNC_PTA_THRESHOLD};
pub use tensor::{NodeId, Tape, Tensor};
pub use unet::{init_params, UNetConfig, UNetParams};
