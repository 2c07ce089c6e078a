//! CPU inference engine for the EDNet small-target detector family:
//! tensor kernels, the block zoo, the seven scalable variant graphs,
//! WIoU regression losses with analytic gradients, NMS-free decoding,
//! COCO-style evaluation and post-training INT8/FP16 quantization.

pub mod blocks;
pub mod decode;
pub mod error;
pub mod graph;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod quant;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use tensor::Tensor;
