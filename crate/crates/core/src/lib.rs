//! Learning from long-tailed data with tail-to-head label noise by
//! disentangling feature channels per class, partially unlearning the channels
//! of implausible classes, and transferring head knowledge to tail classes.
//!
//! Pipeline: [`forge`] builds the noisy long-tailed training set, [`ifd`]
//! trains the original model, [`relabel`] assigns adaptive multi-label sets,
//! [`ifpu`] fine-tunes the unlearned model with masks from G and mixup batches
//! from [`mixer`], and [`harness`] runs and evaluates whole experiments.

pub mod augment;
pub mod cifar;
pub mod data;
pub mod error;
pub mod forge;
pub mod harness;
pub mod ifd;
pub mod ifpu;
pub mod manifest;
pub mod mixer;
pub mod net;
pub mod nn;
pub mod optim;
pub mod plots;
pub mod relabel;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
