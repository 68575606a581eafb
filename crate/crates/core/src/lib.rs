//! Route energy estimation: domain types, synthetic data, estimators,
//! evaluation and benchmarking.

pub mod bench;
pub mod domain;
pub mod error;
pub mod eval;
pub mod io;
pub mod models;
pub mod scaling;
pub mod schema;
pub mod simgen;

pub use domain::{Dataset, LatentConditions, Route, Segment, Split, VehicleModel, MAX_LEN};
pub use error::{CoreError, Result};
pub use models::{Estimator, ModelKind, Net, NetConfig, RetPreset, TrainConfig};
pub use schema::{encode_segment, fit_schema, route_to_matrix, FeatureSchema};

pub type EncodedBatch32 = models::EncodedBatch<f32>;
pub type EncodedBatch64 = models::EncodedBatch<f64>;
