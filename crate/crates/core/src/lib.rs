//! Source-free domain adaptation for multi-organ image segmentation.
//!
//! Given a segmentation model pretrained on a labeled source domain and an
//! unlabeled target dataset, this crate trains a compact target-domain model
//! without ever touching the source data. The adaptation couples four
//! networks — a statistics-anchored copy of the source model (U1), a frozen
//! copy (U2), a style compensation network (SC) and the desired compact
//! model (U3) — through feature-statistics matching, entropy minimization,
//! pseudo-label guided style compensation, pixel-adaptive mask refinement
//! and a two-stage circular learning schedule.
//!
//! The crate is organized by pipeline stage:
//!
//! * [`dataio`] — volume ingestion, preprocessing, splits, synthetic benchmark
//! * [`segnet`] — declarative U-Net construction, freeze plans, BN statistics
//! * [`stylecomp`] — the style compensation network and transform
//! * [`losses`] — dice / entropy / feature-statistics / combined objectives
//! * [`pamr`] — pixel-adaptive mask refinement and pseudo-labels
//! * [`engine`] — source pretraining, the two-stage adaptation loop, inference
//! * [`eval`] — volume-level DSC / ASSD metrics and reports
//!
//! Everything is deterministic given a seed: batching, weight init and the
//! training loops draw from keyed [`rng`] streams so that runs reproduce
//! bit-exactly and checkpoints resume exactly.

pub mod dataio;
pub mod engine;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod pamr;
pub mod rng;
pub mod segnet;
pub mod stylecomp;
pub mod tensordict;

pub use error::{Error, Result};
