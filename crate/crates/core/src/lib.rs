//! Training and inference for multi-exit networks on long-tailed data.
//!
//! Examples leave the network early during training once an exit classifies
//! them correctly and confidently, so hard examples keep accumulating loss at
//! deeper exits. At inference a label-free confidence threshold picks the
//! exit, trading accuracy against FLOPs.

mod codec;
pub mod data;
pub mod error;
pub mod exit;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
