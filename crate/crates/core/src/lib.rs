//! Block-level compression and distillation retraining of conditional
//! diffusion U-Nets.
//!
//! * [`config`] / [`unet`]: declarative U-Net description and the noise predictor.
//! * [`compression`]: block-removal plans, presets and weight inheritance.
//! * [`diffusion`]: noise schedules, the training losses and samplers.
//! * [`distill`]: teacher training and student distillation loops.
//! * [`analysis`]: parameter/MAC accounting, pruning sensitivity, attribution maps.
//! * [`data`]: synthetic shape captions, folder ingestion and the latent codec.

pub mod analysis;
pub mod archive;
pub mod compression;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod ops;
pub mod params;
pub mod text;
pub mod unet;

pub use config::{BlockKind, BlockPath, BlockSpec, StageKind, UNetConfig};
pub use error::{Error, Result};
pub use text::{Condition, TextEncoder};
pub use unet::{Context, FeatureTapSet, UNet};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
