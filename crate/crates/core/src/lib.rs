//! Hybrid self-distillation and prototype-supervised ViT pretraining with
//! its frozen-backbone evaluation stack.

pub mod backbone;
pub mod config;
pub mod data;
pub mod downstream;
pub mod error;
pub mod fedsim;
pub mod heads_losses;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod pretrain;
pub mod prototypes;
pub mod rng;

pub use backbone::{ViTConfig, Vit};
pub use config::ExperimentConfig;
pub use data::{CaptionSample, Corpus, ImageSample, SegSample};
pub use downstream::FeatureSet;
pub use error::{Error, Result};
pub use fedsim::FederatedConfig;
pub use image::{Image, Mask};
pub use metrics::MetricReport;
pub use nn::ParameterSnapshot;
pub use pretrain::PretrainConfig;
