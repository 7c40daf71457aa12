//! Landing-time prediction pipeline: trajectory ingestion, airspace geometry,
//! holding featurization, rasterization, dataset assembly, model training
//! and evaluation, plus a synthetic traffic generator.

pub mod airspace;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod holding;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod raster;
pub mod simgen;
pub mod train;

pub use error::{CoreError, Result};

pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type TensorSet64 = train::TensorSet<f64>;
pub type TensorSet32 = train::TensorSet<f32>;
