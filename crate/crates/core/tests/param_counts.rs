use evroute_core::models::{Net, NetConfig, RetConfig};
use evroute_core::{ModelKind, RetPreset};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn built(config: &NetConfig) -> usize {
    let (_, params) = Net::build::<f32, _>(config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    params.num_weights()
}

#[test]
fn counts_match_hand_arithmetic() {
    let ffn = ModelKind::Ffn.net_config(9).unwrap();
    assert_eq!(ffn.param_count(), 9 * 32 + 32 + 32 * 32 + 32 + 32 + 1);
    assert_eq!(ffn.param_count(), 1409);

    let rnn = ModelKind::Rnn.net_config(9).unwrap();
    let by_hand = (9 * 32 + 32) + 3 * (32 * 64 + 64 * 64 + 64) + (64 * 32 + 32) + (32 + 1);
    assert_eq!(rnn.param_count(), by_hand);
    assert_eq!(rnn.param_count(), 21057);
}

#[test]
fn analytic_counts_match_built_networks() {
    for kind in ModelKind::ALL.into_iter().filter(|k| k.is_neural()) {
        let c = kind.net_config(9).unwrap();
        assert_eq!(c.param_count(), built(&c), "{kind}");
    }
}

#[test]
fn ret_presets_fall_in_their_bands() {
    let bands = [(15_000, 30_000), (250_000, 450_000), (2_500_000, 3_500_000)];
    for (preset, (lo, hi)) in RetPreset::ALL.into_iter().zip(bands) {
        let n = NetConfig::Ret(preset.config(9)).param_count();
        assert!((lo..=hi).contains(&n), "{preset}: {n}");
    }
}

#[test]
fn block_weights_are_twelve_d_squared_plus_biases() {
    for (preset, core) in RetPreset::ALL.into_iter().zip([12_288, 331_776, 2_654_208]) {
        let c: RetConfig = preset.config(9);
        // 12·L·d² from the weight matrices, 13·L·d from biases and norms
        assert_eq!(c.block_param_count(), core + 13 * c.blocks * c.dim, "{preset}");
    }
}
