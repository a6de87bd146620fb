//! Next-step prediction on road intersection graphs.
//!
//! The crate covers the whole pipeline: graph construction and spatial
//! queries, per-node POI descriptors, structural embeddings, GPS-to-node
//! projection, the sequence model with its training loop, and evaluation.

pub mod autodiff;
pub mod dataset;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod graph;
pub mod model;
pub mod pipeline;
pub mod projection;
pub mod rng;
pub mod testkit;
pub mod training;

pub use error::{Error, Result};
pub use graph::{NodeId, PlanarPoint, Poi, RoadGraph};
pub use dataset::{InputFlags, PreparedExample};
pub use model::{Model, ModelConfig};
pub use pipeline::RunConfig;
pub use projection::{Example, GpsSample, GpsStream};
