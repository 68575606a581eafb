//! Feature layout and encoding.
//!
//! Encoded width is `5 + V`: four z-scored continuous features, the stem
//! indicator as 0/1, then a one-hot block over the vehicle vocabulary.

use evroute_nn::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{Route, Segment, MAX_LEN};
use crate::error::{CoreError, Result};

pub const SCHEMA_VERSION: &str = "evroute-features/1";

pub const CONTINUOUS_FEATURES: [&str; 4] = ["distance", "speed_moving", "time_stationary", "air_temperature"];

pub const STD_FLOOR: f64 = 1e-6;

/// Default one-hot vocabulary size.
pub const DEFAULT_VOCAB: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub version: String,
    pub feature_names: Vec<String>,
    pub vocab_size: usize,
    pub means: [f64; 4],
    pub stds: [f64; 4],
}

fn feature_names(vocab_size: usize) -> Vec<String> {
    CONTINUOUS_FEATURES
        .iter()
        .map(|s| s.to_string())
        .chain(std::iter::once("is_stem".to_string()))
        .chain((0..vocab_size).map(|i| format!("onehot_{i}")))
        .collect()
}

impl FeatureSchema {
    pub fn new(vocab_size: usize, means: [f64; 4], stds: [f64; 4]) -> Result<Self> {
        let s = Self { version: SCHEMA_VERSION.into(), feature_names: feature_names(vocab_size), vocab_size, means, stds };
        s.validate()?;
        Ok(s)
    }

    /// Mean 0, std 1: encoding leaves raw values untouched.
    pub fn identity(vocab_size: usize) -> Self {
        Self::new(vocab_size, [0.0; 4], [1.0; 4]).expect("identity schema is valid")
    }

    /// Encoded feature width `F`.
    pub fn width(&self) -> usize {
        5 + self.vocab_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(CoreError::Version {
                what: "feature schema",
                found: self.version.clone(),
                expected: SCHEMA_VERSION.into(),
            });
        }
        if self.vocab_size == 0 {
            return Err(CoreError::Validation("vehicle vocabulary is empty".into()));
        }
        if self.feature_names != feature_names(self.vocab_size) {
            return Err(CoreError::Validation("feature order does not match the fixed layout".into()));
        }
        if self.stds.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || self.means.iter().any(|m| !m.is_finite()) {
            return Err(CoreError::Validation("normalization stats must be finite with std > 0".into()));
        }
        Ok(())
    }

    /// SHA-256 over the version, layout and the exact bit patterns of the
    /// normalization stats.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.version.as_bytes());
        for n in &self.feature_names {
            h.update(b"\0");
            h.update(n.as_bytes());
        }
        h.update((self.vocab_size as u64).to_le_bytes());
        for v in self.means.iter().chain(&self.stds) {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn raw_continuous(s: &Segment) -> [f64; 4] {
    [s.distance, s.speed_moving, s.time_stationary, s.air_temperature]
}

/// Feature vector of width `F` for one segment.
pub fn encode_segment(segment: &Segment, vehicle_id: usize, schema: &FeatureSchema) -> Result<Vec<f64>> {
    if vehicle_id >= schema.vocab_size {
        return Err(CoreError::UnknownVehicle { id: vehicle_id, vocab: schema.vocab_size });
    }
    segment.validate()?;
    let mut out = Vec::with_capacity(schema.width());
    for (i, v) in raw_continuous(segment).into_iter().enumerate() {
        out.push((v - schema.means[i]) / schema.stds[i]);
    }
    out.push(if segment.is_stem { 1.0 } else { 0.0 });
    out.extend((0..schema.vocab_size).map(|i| if i == vehicle_id { 1.0 } else { 0.0 }));
    Ok(out)
}

/// `L × F` matrix whose row `t` is the encoding of segment `t`.
pub fn route_to_matrix<S: Scalar>(route: &Route, schema: &FeatureSchema) -> Result<Tensor<S>> {
    if route.segments.is_empty() {
        return Err(CoreError::Validation(format!("route `{}` has no segments", route.route_id)));
    }
    if route.segments.len() > MAX_LEN {
        return Err(CoreError::Length { len: route.segments.len(), max: MAX_LEN });
    }
    let f = schema.width();
    let mut data = Vec::with_capacity(route.len() * f);
    for s in &route.segments {
        data.extend(encode_segment(s, route.vehicle_id, schema)?.into_iter().map(S::lit));
    }
    Ok(Tensor::new(vec![route.len(), f], data)?)
}

/// Z-score statistics over every segment of `train_routes` (population
/// standard deviation, floored at [`STD_FLOOR`]).
pub fn fit_schema(train_routes: &[&Route], vocab_size: usize) -> Result<FeatureSchema> {
    let n: usize = train_routes.iter().map(|r| r.len()).sum();
    if n < 2 {
        return Err(CoreError::Validation(format!("need at least 2 training segments to fit normalization, got {n}")));
    }
    let segments = || train_routes.iter().flat_map(|r| r.segments.iter());
    let mut means = [0.0; 4];
    for s in segments() {
        for (m, v) in means.iter_mut().zip(raw_continuous(s)) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let mut vars = [0.0; 4];
    for s in segments() {
        for ((acc, v), m) in vars.iter_mut().zip(raw_continuous(s)).zip(&means) {
            *acc += (v - m) * (v - m);
        }
    }
    let stds = vars.map(|v| (v / n as f64).sqrt().max(STD_FLOOR));
    FeatureSchema::new(vocab_size, means, stds)
}
