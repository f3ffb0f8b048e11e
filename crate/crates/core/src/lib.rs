//! Attention-gated retinal image grading at desk scale.
//!
//! The crate bundles a small dense-tensor autodiff engine, the three-part
//! grading network (main classifier, attention branch, zoom-patch branch),
//! greedy zoom-region sampling, the evaluation metrics used for grading and
//! localization, affinity-propagation lesion clustering, a seeded synthetic
//! fundus generator, and the training/evaluation harness behind the
//! `zoomlens` command-line tool.

pub mod error;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
