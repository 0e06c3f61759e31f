//! CPU runtime for distilling a frozen 3D segmentation teacher into
//! channel-scaled students, running them with sliding-window inference, and
//! measuring what the compression buys.

pub mod bench;
pub mod cli;
pub mod error;
pub mod infer;
pub mod kd;
pub mod manifest;
pub mod metrics;
pub mod nifti;
pub mod ops;
pub mod tensor;
pub mod train;
pub mod unet;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::Tensor;
