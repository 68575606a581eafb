#![allow(dead_code)]

use evroute_core::simgen::{generate_dataset, generate_route, GeneratorConfig};
use evroute_core::{Dataset, FeatureSchema, Route};

pub fn small_dataset(seed: u64, n_routes: usize, lengths: (usize, usize)) -> Dataset {
    generate_dataset(&GeneratorConfig { seed, n_routes, route_length_range: lengths, ..Default::default() }).unwrap()
}

pub fn routes(seed: u64, n: usize, lengths: (usize, usize)) -> Vec<Route> {
    let cfg = GeneratorConfig { seed, route_length_range: lengths, ..Default::default() };
    (0..n).map(|i| generate_route(&cfg, i)).collect()
}

/// Normalization fitted on the given routes.
pub fn schema_for(routes: &[Route]) -> FeatureSchema {
    let refs: Vec<&Route> = routes.iter().collect();
    evroute_core::fit_schema(&refs, 4).unwrap()
}
