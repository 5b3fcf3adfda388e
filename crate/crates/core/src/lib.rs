//! Salient segmentation as pixel-pair connectivity prediction.
//!
//! Binary masks are encoded into H×W×C connectivity cubes ([`codec`]), a small
//! relation-aware convolutional model predicts those cubes ([`model`]), and the
//! symmetric agreement rule turns predictions back into masks. Training,
//! multi-scale flip fusion and the usual saliency metrics are included.

pub mod checkpoint;
pub mod codec;
pub mod dataset;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;
pub mod tta;
pub mod verify;

pub use codec::{agreement, decode, encode, fuse_cubes, pixel_scores, threshold_cube, AgreementMap, ConnectivityCube};
pub use error::{Error, Result};
pub use grid::{BinaryMask, ConnectivityPattern, Offset, PatternKind};
pub use model::{ConnNet, Head, PredictorConfig, Upsample};
pub use tensor::{Graph, NodeId, Tensor};
