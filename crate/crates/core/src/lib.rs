//! Landmark detection on x-ray images by heatmap regression.
//!
//! Datasets are ingested into a [`DatasetIndex`], images are encoded as
//! Gaussian heatmaps, an encoder-decoder [`LandmarkNet`] is trained with
//! [`train::fit`], weights can be carried across datasets with
//! [`transfer::run_chain`], and predictions are scored by [`eval`].

pub mod augment;
pub mod datasets;
pub mod digest;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod heatmap;
pub mod models;
pub mod raster;
pub mod synthetic;
pub mod train;
pub mod transfer;

pub use augment::AugmentPolicy;
pub use datasets::{DatasetIndex, DatasetSpec};
pub use error::{Error, Result};
pub use eval::{EvalOptions, MetricsReport, SpacingModel, Unit};
pub use geometry::{AnnotatedImage, ImageSpace, Landmark, LandmarkSet, Split};
pub use heatmap::{DecodeMode, HeatmapStack};
pub use models::{Architecture, BuildOptions, Checkpoint, EncoderKind, LandmarkNet, ModelSpec, Pretrained};
pub use raster::Raster;
pub use train::TrainConfig;
pub use transfer::{ChainSpec, ChainStart};
