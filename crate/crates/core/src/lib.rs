//! Self-paced instance localization over instance-search rank lists, and
//! few-shot detection by search.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bbox;
pub mod cli;
pub mod coattention;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evalkit;
pub mod features;
pub mod fewshot;
pub mod image;
pub mod localizer;
pub mod pipeline;
pub mod run;
pub mod selfpaced;
pub mod synthgen;
pub mod tensor;

pub use bbox::BoundingBox;
pub use error::{Result, SpilError};
pub use image::{Image, Mask};
pub use tensor::{avg_pool_spatial, cosine_xcorr, depthwise_xcorr, mean_kernel, Correlation, CorrelationMap, FeatureMap, Kernel};
