//! Guided meta evolution strategies with trainable action masks, trained
//! on a desk-scale surrogate of fault-induced delayed voltage recovery.
//!
//! The crate is organised bottom-up: [`grid`] simulates the surrogate
//! system, [`policy`] holds the recurrent controller, [`mask`] filters its
//! actions, [`es`] and [`meta`] optimize parameters and latents, and
//! [`rollout`] ties them together into the training and test loops.

pub mod compare;
pub mod config;
pub mod error;
pub mod es;
pub mod grid;
pub mod mask;
pub mod meta;
pub mod objectives;
pub mod policy;
pub mod rng;
pub mod rollout;

pub use config::{Manifest, RunConfig, Variant};
pub use error::{Error, Result};
pub use es::{GradientSubspace, GuidedEs, OptimizerConfig, RewardPair};
pub use grid::{GridConfig, GridEnv, GridModel, ScenarioSpec};
pub use mask::MaskMode;
pub use meta::{LatentContext, LatentStore};
pub use policy::{Checkpoint, PolicyConfig, PolicyNet, PolicyParams};
pub use rollout::{run_training, EpisodeContext, TestReport, Trainer};
