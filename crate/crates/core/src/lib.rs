//! Embedding-perturbed exploration for reward fine-tuning of flow-matching
//! models, on synthetic low-dimensional tasks.
//!
//! A small conditional velocity field is pretrained on a Gaussian-mixture
//! task and then fine-tuned with a contrastive (positive/negative implicit
//! policy) objective. Exploration widens each rollout group with optimized
//! perturbations of the prompt's token embeddings, applied only during the
//! early, high-noise part of sampling; policy updates always condition on
//! the unperturbed prompt.

pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod embedx;
pub mod error;
pub mod flowcore;
pub mod netdiff;
pub mod nftloss;
pub mod optim;
pub mod rewardlab;
pub mod rng;
pub mod schedule;
pub mod trainer;

pub use config::{parse_config, parse_config_str, RunConfig};
pub use error::{Error, Result};
