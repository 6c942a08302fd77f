//! 3-D PET/CT tumour segmentation with SE-normalized U-Nets.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod data;
pub mod error;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod params;
pub mod seed;
pub mod senorm;
pub mod tensor;
pub mod train;
pub mod volumetric;

pub use error::{Error, Result};
pub use loss::{focal_loss, soft_dice_loss, total_loss, LossConfig};
pub use metrics::{aggregate_metrics, segmentation_metrics, AggregateReport, ConfusionCounts, MetricsReport};
pub use model::{build_model, count_params, forward, forward_logits, ModelConfig};
pub use params::ModelParams;
pub use tensor::{Scalar, Tensor};
