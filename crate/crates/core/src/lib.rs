//! Bottleneck text adapter over frozen prompt embeddings, with
//! confidence-weighted test-time augmentation and class-aware
//! segmentation metrics.

pub mod adapter;
pub mod classification;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod metrics;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
