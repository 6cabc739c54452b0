//! Boundary-guided camouflaged object segmentation.
//!
//! The crate provides the network (backbone, edge-aware module, edge-guided
//! fusion, context aggregation), its training objective, the evaluation
//! metrics, dataset handling and the training loop.

pub mod ablation;
pub mod backbone;
pub mod cam;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod datamodel;
pub mod eam;
pub mod efm;
pub mod error;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod trainer;

pub use config::{ModelConfig, RunConfig, TrainConfig, Variant};
pub use error::{BgError, Result};
pub use model::BgNet;
