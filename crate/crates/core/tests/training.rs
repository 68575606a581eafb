mod common;

use evroute_core::eval::{mape_at_level, Level};
use evroute_core::models::train::fit;
use evroute_core::models::{train, Predictor, TrainConfig};
use evroute_core::simgen::default_fleet;
use evroute_core::{CoreError, ModelKind, Route};

fn route_mape(est: &evroute_core::Estimator, routes: &[&Route]) -> f64 {
    let preds = est.predict_segments(routes, est.schema()).unwrap();
    mape_at_level(routes, &preds, Level::Route).unwrap().mape_pct
}

#[test]
fn rnn_memorizes_ten_routes() {
    let routes = common::routes(41, 10, (20, 100));
    let schema = common::schema_for(&routes);
    let refs: Vec<&Route> = routes.iter().collect();
    let cfg = TrainConfig { epochs: 500, early_stopping: false, batch_size: 1, lr: 3e-3, lr_decay: 0.99, seed: 1, ..Default::default() };
    let out = fit(ModelKind::Rnn, &schema, &default_fleet(), &refs, &[], &cfg).unwrap();
    assert_eq!(out.history.len(), 500);
    let m = route_mape(&out.estimator, &refs);
    eprintln!("rnn train route MAPE after 500 epochs: {m:.4}%");
    assert!(m < 1.0, "train route MAPE {m}");
}

#[test]
fn ffn_learns_a_linear_signal() {
    let mut ds = common::small_dataset(12, 600, (20, 60));
    for r in &mut ds.routes {
        r.actual_energy = Some(r.segments.iter().map(|s| 0.05 * s.distance).collect());
        r.latents = None;
    }
    let cfg = TrainConfig { epochs: 300, patience: 40, batch_size: 8, lr: 3e-3, lr_decay: 0.98, seed: 4, ..Default::default() };
    let out = train(ModelKind::Ffn, &ds, &cfg).unwrap();
    let val = ds.routes_in(evroute_core::Split::Val);
    let m = route_mape(&out.estimator, &val);
    eprintln!("ffn val route MAPE on 0.05·distance targets: {m:.4}% (best epoch {})", out.best_epoch);
    assert!(m < 0.5, "val route MAPE {m}");
}

#[test]
fn same_seed_gives_bitwise_identical_training() {
    let ds = common::small_dataset(5, 120, (10, 30));
    for kind in [ModelKind::Ffn, ModelKind::Rnn, ModelKind::Ret(evroute_core::RetPreset::Ret20k)] {
        let cfg = TrainConfig { epochs: 3, seed: 77, ..Default::default() };
        let a = train(kind, &ds, &cfg).unwrap();
        let b = train(kind, &ds, &cfg).unwrap();
        assert_eq!(a.final_loss.to_bits(), b.final_loss.to_bits(), "{kind}");
        let (Predictor::Neural { params: pa, .. }, Predictor::Neural { params: pb, .. }) = (a.estimator.predictor(), b.estimator.predictor()) else {
            panic!()
        };
        for (x, y) in pa.iter().zip(pb.iter()) {
            assert!(x.value.data().iter().zip(y.value.data()).all(|(u, v)| u.to_bits() == v.to_bits()), "{kind}: {}", x.name);
        }
        let c = train(kind, &ds, &TrainConfig { seed: 78, ..cfg }).unwrap();
        assert_ne!(a.final_loss.to_bits(), c.final_loss.to_bits(), "{kind}: seed has no effect");
    }
}

#[test]
fn divergence_is_reported() {
    let ds = common::small_dataset(5, 60, (10, 20));
    let cfg = TrainConfig { epochs: 50, lr: 1e30, seed: 1, early_stopping: false, ..Default::default() };
    match train(ModelKind::Ffn, &ds, &cfg) {
        Err(CoreError::Diverged { epoch, .. }) => assert!(epoch >= 1),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.final_loss)),
    }
}

#[test]
fn baselines_need_no_epochs() {
    let ds = common::small_dataset(8, 80, (10, 20));
    for kind in [ModelKind::Distance, ModelKind::Physics] {
        let out = train(kind, &ds, &TrainConfig::default()).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.estimator.kind(), kind);
    }
}
