//! Region-aware graph pooling network for skeleton action recognition.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors and a reverse-mode tape over a closed operator set
//! * [`skeleton`]: topologies, adjacency normalisation, partition schemes
//! * [`pooling`]: correlation-weighted region pooling and temporal pooling
//! * [`gcn`]: spatial/temporal graph convolution and batch normalisation
//! * [`blocks`]: cross fusion block, information supplement module, feature streams, head
//! * [`model`]: light/heavy assembly, FLOPs accounting, checkpoints
//! * [`train`]: loss, Nesterov SGD, schedule, augmentation, training loop
//! * [`data`]: dataset files, synthetic motion generator, score fusion
//! * [`gradcheck`]: finite-difference verification of every operator

pub mod error;
pub mod blocks;
pub mod data;
pub mod gcn;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod pooling;
pub mod skeleton;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
