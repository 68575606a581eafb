use evroute_core::io::write_dataset;
use evroute_core::simgen::{
    default_fleet, generate_dataset, generate_route, physics_energy_full, soc_trace, GeneratorConfig, HVAC_SETPOINT,
};
use evroute_core::{LatentConditions, Segment, VehicleModel};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

fn vehicle() -> impl Strategy<Value = VehicleModel> {
    (0usize..4).prop_map(|i| default_fleet().remove(i))
}

fn segment() -> impl Strategy<Value = Segment> {
    (1.0f64..10_000.0, 0.5f64..40.0, 0.0f64..1000.0, -20.0f64..45.0, any::<bool>()).prop_map(|(d, v, ts, t, stem)| Segment {
        distance: d,
        speed_moving: v,
        time_stationary: ts,
        air_temperature: t,
        is_stem: stem,
    })
}

fn latents() -> impl Strategy<Value = LatentConditions> {
    (0.5f64..2.0, 0.5f64..2.0, 0.0f64..=2.0).prop_map(|(tr, dr, hv)| LatentConditions {
        traffic_factor: tr,
        driver_factor: dr,
        hvac_usage_factor: hv,
        noise_sigma: 0.05,
    })
}

proptest! {
    #[test]
    fn oracle_is_positive(s in segment(), v in vehicle(), l in latents(), noise in 0.01f64..10.0) {
        prop_assert!(physics_energy_full(&s, &v, &l, noise) >= 0.0);
    }

    #[test]
    fn oracle_grows_with_distance(s in segment(), v in vehicle(), l in latents(), extra in 0.0f64..5000.0) {
        let longer = Segment { distance: s.distance + extra, ..s.clone() };
        prop_assert!(physics_energy_full(&longer, &v, &l, 1.0) >= physics_energy_full(&s, &v, &l, 1.0));
    }

    #[test]
    fn oracle_grows_with_stationary_time(s in segment(), v in vehicle(), l in latents(), extra in 0.0f64..600.0) {
        let idle = Segment { time_stationary: s.time_stationary + extra, ..s.clone() };
        prop_assert!(physics_energy_full(&idle, &v, &l, 1.0) >= physics_energy_full(&s, &v, &l, 1.0));
    }

    #[test]
    fn oracle_grows_away_from_setpoint(s in segment(), v in vehicle(), l in latents(), a in 0.0f64..40.0, b in 0.0f64..40.0, above in any::<bool>()) {
        let (near, far) = if a <= b { (a, b) } else { (b, a) };
        let sign = if above { 1.0 } else { -1.0 };
        let at = |dev: f64| Segment { air_temperature: HVAC_SETPOINT + sign * dev, ..s.clone() };
        prop_assert!(physics_energy_full(&at(far), &v, &l, 1.0) >= physics_energy_full(&at(near), &v, &l, 1.0));
    }

    #[test]
    fn routes_regenerate_identically(seed in any::<u64>(), index in 0usize..10_000) {
        let cfg = GeneratorConfig { seed, ..Default::default() };
        let r = generate_route(&cfg, index);
        prop_assert_eq!(&r, &generate_route(&cfg, index));
        r.validate().unwrap();
        prop_assert!(r.actual_energy.as_ref().unwrap().iter().all(|e| *e >= 0.0 && e.is_finite()));
    }
}

#[test]
fn hot_fraction_matches_the_mixture() {
    let cfg = GeneratorConfig { seed: 2024, n_routes: 10_000, route_length_range: (1, 1), ..Default::default() };
    let ds = generate_dataset(&cfg).unwrap();
    let hot = ds.routes.iter().filter(|r| r.mean_temperature() >= 35.0).count() as f64 / 10_000.0;

    let tail = |mean: f64, std: f64| 1.0 - Normal::new(mean, std).unwrap().cdf(35.0);
    let expected: f64 = cfg.temperature.components.iter().map(|c| c.weight * tail(c.mean, c.std)).sum();
    let sd = (expected * (1.0 - expected) / 10_000.0).sqrt();
    eprintln!("hot fraction {hot:.4}, mixture tail mass {expected:.4}");
    assert!((hot - 0.15).abs() <= 0.02, "{hot}");
    assert!((hot - expected).abs() <= 4.0 * sd, "{hot} vs {expected}");
}

#[test]
fn generation_is_byte_identical() {
    let cfg = GeneratorConfig { seed: 7, n_routes: 300, ..Default::default() };
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    write_dataset(&generate_dataset(&cfg).unwrap(), dirs[0].path()).unwrap();
    write_dataset(&generate_dataset(&cfg).unwrap(), dirs[1].path()).unwrap();
    write_dataset(&generate_dataset(&GeneratorConfig { threads: 3, ..cfg }).unwrap(), dirs[2].path()).unwrap();
    for name in ["routes.jsonl", "schema.json", "dataset.json"] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        assert_eq!(a, std::fs::read(dirs[1].path().join(name)).unwrap(), "{name}");
        assert_eq!(a, std::fs::read(dirs[2].path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn cold_more_than_doubles_energy() {
    // Each route on its own vehicle, everything but temperature and HVAC use held fixed.
    let cfg = GeneratorConfig { seed: 1, ..Default::default() };
    let fleet = default_fleet();
    let nominal = LatentConditions { traffic_factor: 1.0, driver_factor: 1.0, hvac_usage_factor: 1.0, noise_sigma: 0.0 };
    let (mut cold_sum, mut mild_sum) = (0.0, 0.0);
    let mut ratios: Vec<f64> = (0..1000)
        .map(|i| {
            let r = generate_route(&cfg, i);
            let v = &fleet[r.vehicle_id];
            let total = |t: f64, hvac: f64| -> f64 {
                let l = LatentConditions { hvac_usage_factor: hvac, ..nominal };
                r.segments.iter().map(|s| physics_energy_full(&Segment { air_temperature: t, ..s.clone() }, v, &l, 1.0)).sum()
            };
            let (cold, mild) = (total(-10.0, 2.0), total(21.0, 0.5));
            cold_sum += cold;
            mild_sum += mild;
            cold / mild
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    let (median, fleet_ratio) = (ratios[500], cold_sum / mild_sum);
    eprintln!("cold/mild energy: median route {median:.3}, fleet total {fleet_ratio:.3}, range {:.3}..{:.3}", ratios[0], ratios[999]);
    assert!(median > 2.0 && fleet_ratio > 2.0);
    // Physics alone: any route at -10 °C uses more than at the setpoint.
    assert!(ratios[0] > 1.0);
}

#[test]
fn hot_routes_return_with_less_charge() {
    let ds = generate_dataset(&GeneratorConfig { seed: 31, n_routes: 6000, ..Default::default() }).unwrap();
    for v in &ds.fleet {
        let rows: Vec<(f64, f64, f64)> = ds
            .routes
            .iter()
            .filter(|r| r.vehicle_id == v.id)
            .map(|r| (r.total_distance(), soc_trace(r, v).unwrap().returning_soc, r.mean_temperature()))
            .filter(|row| row.1 > 0.0)
            .collect();
        // SOC against distance on mild routes, by least squares.
        let mild: Vec<_> = rows.iter().filter(|r| (15.0..=27.0).contains(&r.2)).collect();
        let n = mild.len() as f64;
        let (mx, my) = (mild.iter().map(|r| r.0).sum::<f64>() / n, mild.iter().map(|r| r.1).sum::<f64>() / n);
        let sxy: f64 = mild.iter().map(|r| (r.0 - mx) * (r.1 - my)).sum();
        let sxx: f64 = mild.iter().map(|r| (r.0 - mx).powi(2)).sum();
        let slope = sxy / sxx;
        let hot: Vec<f64> = rows.iter().filter(|r| r.2 >= 35.0).map(|r| r.1 - (my + slope * (r.0 - mx))).collect();
        let gap = hot.iter().sum::<f64>() / hot.len() as f64;
        eprintln!("{}: hot routes return {gap:.2} SOC points vs mild at equal distance ({} hot)", v.name, hot.len());
        assert!(gap < 0.0, "{}: {gap}", v.name);
    }
}
