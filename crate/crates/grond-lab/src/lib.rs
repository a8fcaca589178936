//! Backdoor attack/defense laboratory built on the small-CNN core:
//! poisoned-dataset construction, trigger synthesis (universal PGD and
//! baselines), adversarial backdoor injection during training, a defense
//! suite, and parameter/feature-space diagnostics.

pub mod abi;
pub mod analysis;
pub mod data;
pub mod defenses;
pub mod error;
pub mod triggers;

pub use error::{Error, Result};
