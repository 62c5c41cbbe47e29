//! Clean-label hidden-trigger backdoor poisoning at desk scale: a synthetic
//! physical-trigger benchmark, a differentiable CNN harness, four poison
//! crafting algorithms with imperceptibility regularizers and a repel-term
//! loss, evaluation metrics, and feature-space filtering defenses.

pub mod attacks;
pub mod datamodel;
pub mod defenses;
pub mod metrics;
pub mod triggerselect;
pub mod modelharness;
pub mod regularizers;
pub mod synthbench;
pub mod error;

pub use error::{Error, ErrorClass, Result};
