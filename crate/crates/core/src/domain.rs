//! Routes, segments, vehicles and datasets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::schema::FeatureSchema;

/// Longest route any model accepts; also the positional table size.
pub const MAX_LEN: usize = 256;

/// Physics constants for one vehicle make and model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleModel {
    /// Index into the one-hot vocabulary.
    pub id: usize,
    pub name: String,
    /// Wh per km at zero speed.
    pub traction_base: f64,
    /// Wh·s²/(m²·km), multiplies v².
    pub traction_quad: f64,
    /// W per °C of deviation from the 21 °C cabin setpoint.
    pub hvac_coeff: f64,
    /// Fractional consumption penalty per °C below 0.
    pub cold_derate: f64,
    /// kWh.
    pub battery_capacity: f64,
}

impl VehicleModel {
    pub fn validate(&self) -> Result<()> {
        let ok = self.traction_base > 0.0
            && self.traction_quad >= 0.0
            && self.hvac_coeff >= 0.0
            && (0.0..0.1).contains(&self.cold_derate)
            && self.battery_capacity > 0.0
            && [self.traction_base, self.traction_quad, self.hvac_coeff, self.battery_capacity]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(CoreError::Validation(format!("vehicle `{}` has out-of-range constants", self.name)))
        }
    }
}

/// Checks that fleet ids are exactly `0..len` in order.
pub fn validate_fleet(fleet: &[VehicleModel]) -> Result<()> {
    for (i, v) in fleet.iter().enumerate() {
        if v.id != i {
            return Err(CoreError::Validation(format!("fleet ids must be dense: position {i} has id {}", v.id)));
        }
        v.validate()?;
    }
    Ok(())
}

/// One travel leg plus the stop at its end.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// Meters.
    #[serde(rename = "d_m")]
    pub distance: f64,
    /// m/s while moving.
    #[serde(rename = "v_mps")]
    pub speed_moving: f64,
    /// Seconds parked and delivering at the end of the segment.
    #[serde(rename = "t_stat_s")]
    pub time_stationary: f64,
    /// °C at the start of the segment.
    #[serde(rename = "temp_c")]
    pub air_temperature: f64,
    /// Travel to or from the station rather than between customer stops.
    pub is_stem: bool,
}

impl Segment {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.distance, self.speed_moving, self.time_stationary, self.air_temperature]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(CoreError::Validation("segment has a non-finite field".into()));
        }
        if self.distance < 0.0 || self.speed_moving <= 0.0 || self.time_stationary < 0.0 {
            return Err(CoreError::Validation(format!(
                "segment needs distance >= 0, speed > 0, time_stationary >= 0 (got {}, {}, {})",
                self.distance, self.speed_moving, self.time_stationary
            )));
        }
        Ok(())
    }

    /// Seconds spent moving.
    pub fn moving_time(&self) -> f64 {
        self.distance / self.speed_moving
    }
}

/// Route-level conditions the estimators never observe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentConditions {
    pub traffic_factor: f64,
    pub driver_factor: f64,
    pub hvac_usage_factor: f64,
    pub noise_sigma: f64,
}

impl Default for LatentConditions {
    fn default() -> Self {
        Self { traffic_factor: 1.0, driver_factor: 1.0, hvac_usage_factor: 1.0, noise_sigma: 0.05 }
    }
}

impl LatentConditions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.traffic_factor >= 0.5
            && self.driver_factor >= 0.5
            && (0.0..=2.0).contains(&self.hvac_usage_factor)
            && self.noise_sigma >= 0.0
            && self.traffic_factor.is_finite()
            && self.driver_factor.is_finite()
            && self.noise_sigma.is_finite();
        if ok {
            Ok(())
        } else {
            Err(CoreError::Validation(format!("latent conditions out of range: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub route_id: String,
    pub vehicle_id: usize,
    pub segments: Vec<Segment>,
    /// Measured Wh per segment.
    pub actual_energy: Option<Vec<f64>>,
    /// Present only on generated data.
    pub latents: Option<LatentConditions>,
}

impl Route {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(CoreError::Validation(format!("route `{}` has no segments", self.route_id)));
        }
        if self.segments.len() > MAX_LEN {
            return Err(CoreError::Length { len: self.segments.len(), max: MAX_LEN });
        }
        for s in &self.segments {
            s.validate()?;
        }
        if let Some(e) = &self.actual_energy {
            if e.len() != self.segments.len() {
                return Err(CoreError::Validation(format!(
                    "route `{}`: {} energies for {} segments",
                    self.route_id,
                    e.len(),
                    self.segments.len()
                )));
            }
            if e.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(CoreError::Validation(format!("route `{}` has a negative energy", self.route_id)));
            }
        }
        if let Some(l) = &self.latents {
            l.validate()?;
        }
        Ok(())
    }

    /// Meters.
    pub fn total_distance(&self) -> f64 {
        self.segments.iter().map(|s| s.distance).sum()
    }

    pub fn mean_temperature(&self) -> f64 {
        self.segments.iter().map(|s| s.air_temperature).sum::<f64>() / self.segments.len() as f64
    }

    /// Sum of measured Wh, if present.
    pub fn total_energy(&self) -> Option<f64> {
        self.actual_energy.as_ref().map(|e| e.iter().sum())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub routes: Vec<Route>,
    pub split: BTreeMap<String, Split>,
    pub generator_seed: u64,
    pub schema: FeatureSchema,
    pub fleet: Vec<VehicleModel>,
}

impl Dataset {
    pub fn routes_in(&self, split: Split) -> Vec<&Route> {
        self.routes.iter().filter(|r| self.split.get(&r.route_id) == Some(&split)).collect()
    }

    pub fn split_of(&self, route: &Route) -> Option<Split> {
        self.split.get(&route.route_id).copied()
    }

    pub fn vehicle(&self, id: usize) -> Result<&VehicleModel> {
        self.fleet.get(id).ok_or(CoreError::UnknownVehicle { id, vocab: self.fleet.len() })
    }

    pub fn num_segments(&self) -> usize {
        self.routes.iter().map(Route::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        validate_fleet(&self.fleet)?;
        if self.fleet.len() != self.schema.vocab_size {
            return Err(CoreError::Validation(format!(
                "fleet has {} vehicles but schema vocabulary is {}",
                self.fleet.len(),
                self.schema.vocab_size
            )));
        }
        if self.split.len() != self.routes.len() {
            return Err(CoreError::Validation("every route needs exactly one split label".into()));
        }
        for r in &self.routes {
            r.validate()?;
            if !self.split.contains_key(&r.route_id) {
                return Err(CoreError::Validation(format!("route `{}` has no split", r.route_id)));
            }
            if r.vehicle_id >= self.schema.vocab_size {
                return Err(CoreError::UnknownVehicle { id: r.vehicle_id, vocab: self.schema.vocab_size });
            }
        }
        Ok(())
    }
}
