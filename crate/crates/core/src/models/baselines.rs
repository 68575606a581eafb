//! Non-learned reference estimators.

use serde::{Deserialize, Serialize};

use crate::domain::{Route, VehicleModel};
use crate::error::{CoreError, Result};
use crate::simgen::physics_energy_proxy;

/// Least-squares line from total route distance (m) to total route energy (Wh).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceBaseline {
    /// Wh per meter.
    pub slope: f64,
    /// Wh per route.
    pub intercept: f64,
}

impl DistanceBaseline {
    pub fn fit(routes: &[&Route]) -> Result<Self> {
        let points: Vec<(f64, f64)> = routes
            .iter()
            .map(|r| {
                r.total_energy()
                    .map(|e| (r.total_distance(), e))
                    .ok_or_else(|| CoreError::Validation(format!("route `{}` has no measured energy", r.route_id)))
            })
            .collect::<Result<_>>()?;
        Self::fit_points(&points)
    }

    pub fn fit_points(points: &[(f64, f64)]) -> Result<Self> {
        if points.len() < 2 {
            return Err(CoreError::DegenerateFit(format!("need at least 2 routes, got {}", points.len())));
        }
        let n = points.len() as f64;
        let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
        let my = points.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        if !(sxx > 0.0) {
            return Err(CoreError::DegenerateFit("every route has the same distance".into()));
        }
        let slope = sxy / sxx;
        Ok(Self { slope, intercept: my - slope * mx })
    }

    pub fn predict_route(&self, route: &Route) -> f64 {
        self.slope * route.total_distance() + self.intercept
    }

    /// Route prediction shared out in proportion to segment distance (evenly
    /// when the route has zero length).
    pub fn predict_segments(&self, route: &Route) -> Vec<f64> {
        let total = self.predict_route(route);
        let dist = route.total_distance();
        let n = route.len() as f64;
        route.segments.iter().map(|s| if dist > 0.0 { total * s.distance / dist } else { total / n }).collect()
    }
}

/// The physics oracle at nominal conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicsBaseline {
    pub fleet: Vec<VehicleModel>,
}

impl PhysicsBaseline {
    pub fn predict_segments(&self, route: &Route) -> Result<Vec<f64>> {
        let vehicle = self
            .fleet
            .get(route.vehicle_id)
            .ok_or(CoreError::UnknownVehicle { id: route.vehicle_id, vocab: self.fleet.len() })?;
        Ok(route.segments.iter().map(|s| physics_energy_proxy(s, vehicle)).collect())
    }
}
