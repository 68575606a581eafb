use evroute_core::scaling::{data_for_params, log10_optimal_params, optimal_params, optimal_params_exact, preset_for_budget};
use evroute_core::RetPreset;
use proptest::prelude::*;

proptest! {
    #[test]
    fn optimum_increases_with_data(a in 1.0f64..1e15, b in 1.0f64..1e15) {
        prop_assume!(a < b);
        prop_assert!(optimal_params_exact(a).unwrap() < optimal_params_exact(b).unwrap());
        prop_assert!(optimal_params(a).unwrap() <= optimal_params(b).unwrap());
    }

    #[test]
    fn slope_in_log_space(a in 1.0f64..1e15, b in 1.0f64..1e15) {
        prop_assume!((a.log10() - b.log10()).abs() > 1e-3);
        let slope = (log10_optimal_params(b).unwrap() - log10_optimal_params(a).unwrap()) / (b.log10() - a.log10());
        prop_assert!((slope - 0.51).abs() < 1e-9);
    }

    #[test]
    fn inverse_round_trips(n in 2.0f64..1e9) {
        let d = data_for_params(n).unwrap();
        prop_assume!(d >= 1.0);
        prop_assert!((optimal_params_exact(d).unwrap() / n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn presets_are_monotone(a in 1.0f64..1e8, b in 1.0f64..1e8) {
        prop_assume!(a <= b);
        prop_assert!(preset_for_budget(a, 9).unwrap().preset <= preset_for_budget(b, 9).unwrap().preset);
    }
}

#[test]
fn ladder_endpoints() {
    assert_eq!(preset_for_budget(1e12, 9).unwrap().preset, RetPreset::Ret3m);
    assert!(preset_for_budget(1.0, 9).unwrap().undersized);
}
