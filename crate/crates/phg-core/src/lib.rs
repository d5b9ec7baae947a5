//! Desk-scale toolkit for masked multi-modal training, random-masking
//! inference ensembles, fused-network equivalence, pseudo-label selection and
//! distillation, verified end to end on procedurally generated scenes.
//!
//! Modality-level masking turns one network over a modality set into an
//! implicit family of "hyper-edge" subnetworks: inputs are always visible,
//! outputs always masked, and each intermediate modality is dropped (zeroed)
//! independently. Sampling masks at test time yields prediction ensembles;
//! the same construction embeds independent per-edge networks into one fused
//! network whose cross-edge kernel blocks are zero.

pub mod config;
pub mod distill;
pub mod ensemble;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod modality;
pub mod model;
pub mod optim;
pub mod phgt;
pub mod pipeline;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{PhgError, Result};
pub use tensor::{ClassMap, Tensor};
