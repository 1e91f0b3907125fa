//! Residual-phase forecasting for atom interferometer shot streams.
//!
//! The pipeline reconstructs wrapped residual phases from fringe shots,
//! windows them into supervised pairs and trains a dual-branch transformer
//! with cross-depth block retrieval, multiscale fusion and a simulated
//! quantum feature map to predict the next phase as a point on the circle.
//!
//! Core types are generic over the floating-point scalar; the aliases at
//! the crate root fix it to `f64`.

pub mod config;
pub mod dataio;
pub mod error;
pub mod forward;
pub mod fringe;
pub mod fusion;
pub mod head;
pub mod model;
pub mod network;
pub mod numcore;
pub mod params;
pub mod pipeline;
pub mod qfm;
pub mod scalar;
pub mod selftest;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = numcore::Tensor<f64>;
pub type Angle = numcore::Angle<f64>;
pub type ShotRecord = fringe::ShotRecord<f64>;
pub type PhaseResult = fringe::PhaseResult<f64>;
pub type FringeFit = fringe::FringeFit<f64>;
pub type Sample = dataio::Sample<f64>;
pub type DatasetSplit = dataio::DatasetSplit<f64>;
pub type ParamStore = params::ParamStore<f64>;
pub type Forecast = head::Forecast<f64>;
pub type StateVector = qfm::StateVector<f64>;
