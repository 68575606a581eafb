//! Synthetic route generator and the full-knowledge physics oracle.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{validate_fleet, Dataset, LatentConditions, Route, Segment, Split, VehicleModel, MAX_LEN};
use crate::error::{CoreError, Result};
use crate::schema::{fit_schema, FeatureSchema};

/// Cabin setpoint in °C.
pub const HVAC_SETPOINT: f64 = 21.0;

pub fn default_fleet() -> Vec<VehicleModel> {
    let v = |id: usize, name: &str, a: f64, b: f64, hvac: f64, cold: f64, cap: f64| VehicleModel {
        id,
        name: name.into(),
        traction_base: a,
        traction_quad: b,
        hvac_coeff: hvac,
        cold_derate: cold,
        battery_capacity: cap,
    };
    vec![
        v(0, "VAN-A", 120.0, 0.8, 50.0, 0.01, 60.0),
        v(1, "VAN-B", 150.0, 1.0, 60.0, 0.012, 80.0),
        v(2, "CAR-A", 90.0, 0.6, 40.0, 0.008, 40.0),
        v(3, "VAN-C", 135.0, 0.9, 55.0, 0.01, 70.0),
    ]
}

pub fn cold_derate(vehicle: &VehicleModel, temperature: f64) -> f64 {
    1.0 + vehicle.cold_derate * (-temperature).max(0.0)
}

/// Wh consumed on `segment` with every condition known.
pub fn physics_energy_full(segment: &Segment, vehicle: &VehicleModel, latents: &LatentConditions, noise_draw: f64) -> f64 {
    let d_km = segment.distance / 1000.0;
    let v = segment.speed_moving;
    let traction = d_km * (vehicle.traction_base + vehicle.traction_quad * v * v) * latents.traffic_factor * latents.driver_factor;
    let hours = (segment.moving_time() + segment.time_stationary) / 3600.0;
    let hvac = vehicle.hvac_coeff * (segment.air_temperature - HVAC_SETPOINT).abs() * latents.hvac_usage_factor * hours;
    (cold_derate(vehicle, segment.air_temperature) * (traction + hvac) * noise_draw).max(0.0)
}

/// The oracle evaluated at nominal conditions: what a planner without
/// knowledge of traffic, driver or HVAC usage would predict.
pub fn physics_energy_proxy(segment: &Segment, vehicle: &VehicleModel) -> f64 {
    let nominal = LatentConditions { traffic_factor: 1.0, driver_factor: 1.0, hvac_usage_factor: 1.0, noise_sigma: 0.0 };
    physics_energy_full(segment, vehicle, &nominal, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

/// Per-route air temperature: a Gaussian mixture clamped to `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureMixture {
    pub components: Vec<MixtureComponent>,
    pub clamp: (f64, f64),
}

impl Default for TemperatureMixture {
    fn default() -> Self {
        let c = |weight, mean, std| MixtureComponent { weight, mean, std };
        Self { components: vec![c(0.70, 15.0, 8.0), c(0.15, 38.0, 2.0), c(0.15, -5.0, 3.0)], clamp: (-20.0, 45.0) }
    }
}

impl TemperatureMixture {
    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if self.components.is_empty() || (total - 1.0).abs() > 1e-9 {
            return Err(CoreError::Validation(format!("mixture weights must sum to 1, got {total}")));
        }
        if self.components.iter().any(|c| c.weight < 0.0 || !(c.std >= 0.0) || !c.mean.is_finite() || !c.std.is_finite()) {
            return Err(CoreError::Validation("mixture components need weight >= 0 and finite mean/std".into()));
        }
        if !(self.clamp.0 <= self.clamp.1) {
            return Err(CoreError::Validation("temperature clamp range is inverted".into()));
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = self.components.last().expect("validated mixture");
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        let t = Normal::new(chosen.mean, chosen.std).expect("validated std").sample(rng);
        t.clamp(self.clamp.0, self.clamp.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_routes: usize,
    /// Inclusive bounds on segments per route.
    pub route_length_range: (usize, usize),
    pub temperature: TemperatureMixture,
    /// Fraction of a route's segments flagged stem at each end.
    pub stem_fraction: f64,
    pub noise_sigma: f64,
    pub vehicle_fleet: Vec<VehicleModel>,
    /// Worker threads; output does not depend on this.
    pub threads: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_routes: 1000,
            route_length_range: (20, 100),
            temperature: TemperatureMixture::default(),
            stem_fraction: 0.05,
            noise_sigma: 0.05,
            vehicle_fleet: default_fleet(),
            threads: 1,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.route_length_range;
        if !(1 <= lo && lo <= hi && hi <= MAX_LEN) {
            return Err(CoreError::Validation(format!("route_length_range must satisfy 1 <= min <= max <= {MAX_LEN}, got [{lo}, {hi}]")));
        }
        if !(0.0..=0.5).contains(&self.stem_fraction) {
            return Err(CoreError::Validation(format!("stem_fraction must lie in [0, 0.5], got {}", self.stem_fraction)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(CoreError::Validation(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma)));
        }
        if self.vehicle_fleet.is_empty() {
            return Err(CoreError::Validation("vehicle fleet is empty".into()));
        }
        if self.threads == 0 {
            return Err(CoreError::Validation("threads must be >= 1".into()));
        }
        validate_fleet(&self.vehicle_fleet)?;
        self.temperature.validate()
    }
}

pub fn route_id(index: usize) -> String {
    format!("route-{index:06}")
}

/// 80/10/10 split from the first eight bytes of SHA-256(route_id).
pub fn split_for(route_id: &str) -> Split {
    let digest = Sha256::digest(route_id.as_bytes());
    let bucket = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes")) % 100;
    match bucket {
        0..=79 => Split::Train,
        80..=89 => Split::Val,
        _ => Split::Test,
    }
}

/// Number of stem segments at each end of a route of `len` segments.
pub fn stems_per_end(len: usize, stem_fraction: f64) -> usize {
    if stem_fraction == 0.0 {
        0
    } else {
        ((stem_fraction * len as f64).round() as usize).max(1)
    }
}

/// Route `index` of the dataset described by `config`. Draws come from a
/// ChaCha20 stream keyed by `(seed, index)`, so any subset of routes can be
/// regenerated independently.
pub fn generate_route(config: &GeneratorConfig, index: usize) -> Route {
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);

    let (lo, hi) = config.route_length_range;
    let len = rng.random_range(lo..=hi);
    let vehicle = &config.vehicle_fleet[rng.random_range(0..config.vehicle_fleet.len())];
    let temperature = config.temperature.sample(&mut rng);
    let latents = LatentConditions {
        traffic_factor: rng.random_range(0.8..1.4),
        driver_factor: rng.random_range(0.9..1.2),
        hvac_usage_factor: rng.random_range(0.5..2.0),
        noise_sigma: config.noise_sigma,
    };
    let noise = Normal::new(0.0, config.noise_sigma).expect("validated sigma");
    let k = stems_per_end(len, config.stem_fraction);

    let mut segments = Vec::with_capacity(len);
    let mut energy = Vec::with_capacity(len);
    for t in 0..len {
        let is_stem = t < k || t + k >= len;
        let (speed, distance, stationary) = if is_stem {
            (rng.random_range(15.0..25.0), rng.random_range(2000.0..8000.0), rng.random_range(0.0..120.0))
        } else {
            (rng.random_range(4.0..12.0), rng.random_range(100.0..1500.0), rng.random_range(60.0..420.0))
        };
        // Congestion slows the vehicle: the planned speed carries the route's
        // traffic condition, which is visible only when pooled across segments.
        let segment = Segment {
            distance,
            speed_moving: speed / latents.traffic_factor,
            time_stationary: stationary,
            air_temperature: temperature,
            is_stem,
        };
        let draw: f64 = noise.sample(&mut rng);
        energy.push(physics_energy_full(&segment, vehicle, &latents, draw.exp()));
        segments.push(segment);
    }

    Route { route_id: route_id(index), vehicle_id: vehicle.id, segments, actual_energy: Some(energy), latents: Some(latents) }
}

pub fn generate_dataset(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let routes: Vec<Route> = if config.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| CoreError::Validation(format!("thread pool: {e}")))?;
        pool.install(|| (0..config.n_routes).into_par_iter().map(|i| generate_route(config, i)).collect())
    } else {
        (0..config.n_routes).map(|i| generate_route(config, i)).collect()
    };
    let split: BTreeMap<String, Split> = routes.iter().map(|r| (r.route_id.clone(), split_for(&r.route_id))).collect();

    let vocab = config.vehicle_fleet.len();
    let train: Vec<&Route> = routes.iter().filter(|r| split[&r.route_id] == Split::Train).collect();
    let schema = match fit_schema(&train, vocab) {
        Ok(s) => s,
        Err(_) => {
            log::warn!("training split has fewer than 2 segments; using identity normalization");
            FeatureSchema::identity(vocab)
        }
    };
    let dataset = Dataset { routes, split, generator_seed: config.seed, schema, fleet: config.vehicle_fleet.clone() };
    dataset.validate()?;
    Ok(dataset)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SocTrace {
    /// State of charge in percent after each segment.
    pub soc: Vec<f64>,
    pub returning_soc: f64,
    /// Whether the unclamped charge at return is non-negative.
    pub feasible: bool,
}

pub fn soc_trace(route: &Route, vehicle: &VehicleModel) -> Result<SocTrace> {
    let energy = route
        .actual_energy
        .as_ref()
        .ok_or_else(|| CoreError::Validation(format!("route `{}` has no measured energy", route.route_id)))?;
    let mut level = 100.0;
    let soc: Vec<f64> = energy
        .iter()
        .map(|e| {
            level -= 100.0 * e / (vehicle.battery_capacity * 1000.0);
            level.max(0.0)
        })
        .collect();
    Ok(SocTrace { returning_soc: level.max(0.0), feasible: level >= 0.0, soc })
}

pub const SOC_SCATTER_HEADER: &str = "norm_distance,returning_soc_pct,mean_temp_c";

/// One row per route: distance relative to the longest route, returning
/// state of charge, mean temperature.
pub fn soc_scatter_csv(dataset: &Dataset) -> Result<String> {
    let max_distance = dataset.routes.iter().map(Route::total_distance).fold(0.0, f64::max);
    let mut out = String::from(SOC_SCATTER_HEADER);
    out.push('\n');
    for r in &dataset.routes {
        let trace = soc_trace(r, dataset.vehicle(r.vehicle_id)?)?;
        let norm = if max_distance > 0.0 { r.total_distance() / max_distance } else { 0.0 };
        writeln!(out, "{norm},{},{}", trace.returning_soc, r.mean_temperature()).expect("string write");
    }
    Ok(out)
}

pub fn export_soc_scatter(dataset: &Dataset, path: &Path) -> Result<()> {
    let csv = soc_scatter_csv(dataset)?;
    std::fs::write(path, csv).map_err(|e| CoreError::io(path, e))
}
