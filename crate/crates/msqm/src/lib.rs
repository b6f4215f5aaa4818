//! Multi-stage multiscale query-memory transformer for video class-agnostic
//! segmentation.
//!
//! The crate is self-contained: a small f32 tensor engine with taped
//! reverse-mode differentiation, positional embeddings, multi-head attention
//! with scale-specific random token drop, a strided 3D-convolution feature
//! pyramid with transformer encoder and FPN fusion, the two-stage
//! query-memory decoder (plus the conventional multiscale-query baseline), a
//! 3D-convolutional segmentation head, a synthetic moving-shapes dataset, and
//! a train/eval/benchmark harness. See the `book/` guide for a narrative walk
//! through each piece.

pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod embeddings;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod seg_head;
pub mod svg;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};
