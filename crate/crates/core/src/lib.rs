//! Self-distillation pre-training and frozen-feature probing for volumetric
//! images.
//!
//! The crate is organised bottom-up:
//!
//! - [`graph`]: reverse-mode autodiff over `f64` tensors
//! - [`nn`]: parameter store, deterministic init, AdamW, EMA
//! - [`volume`]: voxel grids, resampling, normalisation, on-disk format
//! - [`augment`]: multi-crop sampling and intensity augmentations
//! - [`vit`]: 3D vision transformer encoder with rotary position encoding
//! - [`ssl`]: distillation heads and the three pre-training losses
//! - [`trainer`]: optimisation loop, schedules, checkpointing
//! - [`embed`]: frozen-backbone embedding cache and PCA visualisation
//! - [`probes`]: classification / regression / survival / localisation /
//!   segmentation / retrieval heads over frozen features
//! - [`metrics`]: evaluation metrics with uncertainty estimates
//! - [`phantom`]: synthetic volume corpus for end-to-end tests
//! - [`config`] / [`pipeline`] / [`report`]: run configuration, staged
//!   orchestration, plots and summaries

pub mod augment;
pub mod blobs;
pub mod config;
pub mod embed;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod probes;
pub mod report;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod ssl;
pub mod trainer;
pub mod vit;
pub mod volume;

pub use error::{Error, Result};
