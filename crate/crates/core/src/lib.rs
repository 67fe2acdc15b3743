//! Work-zone aware traffic speed forecasting on a road-network hypergraph.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode differentiation graph.
//! - [`graph`]: road network, k-nearest hypergraph and its normalized operator.
//! - [`features`]: CSV ingestion, feature maps, normalization and windowing.
//! - [`model`]: speed-wave fusion, attention-gated spatio-temporal blocks and
//!   the bidirectional recurrent head.
//! - [`training`]: masked loss, Adam and the epoch loop.
//! - [`evaluation`]: metrics, condition segmentation and ablations.
//! - [`scenario`]: what-if work-zone forecasts on top of a trained model.

pub mod checkpoint;
pub mod config;
pub mod corridor;
pub mod evaluation;
pub mod features;
pub mod graph;
pub mod model;
pub mod scenario;
pub mod synthetic;
pub mod tensor;
pub mod training;

mod error;

pub use error::{Error, ErrorKind, Result};
pub use tensor::{ExprGraph, Tensor, TensorError};
