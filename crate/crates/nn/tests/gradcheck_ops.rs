//! Analytic vs central-difference gradients for every differentiable op.

use evroute_nn::gradcheck::relative_error;
use evroute_nn::{grad_check, GradCheckConfig, Gru, ParamId, ParamStore, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces `y` to a scalar with fixed random weights so every output
/// coordinate contributes a distinct amount.
fn project(tape: &mut Tape<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = tape.input(rand_tensor(&mut rng, &shape, -1.0, 1.0))?;
    let p = tape.mul(y, c)?;
    tape.sum_all(p)
}

fn check<F>(name: &str, params: &ParamStore<f64>, f: F) -> f64
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let report = grad_check(params, f, &GradCheckConfig::default()).unwrap();
    println!("{name:<20} checked {:>4} max rel err {:.3e}", report.checked, report.max_rel_error);
    assert!(report.checked >= 35.min(params.num_weights()));
    assert!(report.passed(), "{name}: {:?}", report.worst);
    report.max_rel_error
}

fn unary_case(name: &str, lo: f64, hi: f64, op: fn(&mut Tape<'_, f64>, Var) -> Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ps = ParamStore::new();
    let x = ps.add("x", rand_tensor(&mut rng, &[5, 7], lo, hi)).unwrap();
    check(name, &ps, |t| {
        let xv = t.param(x);
        let y = op(t, xv)?;
        project(t, y, 99)
    });
}

#[test]
fn elementwise_ops() {
    unary_case("tanh", -2.0, 2.0, |t, x| t.tanh(x));
    unary_case("sigmoid", -4.0, 4.0, |t, x| t.sigmoid(x));
    unary_case("gelu", -3.0, 3.0, |t, x| t.gelu(x));
    unary_case("scale", -3.0, 3.0, |t, x| t.scale(x, -1.7));
    unary_case("softmax", -3.0, 3.0, |t, x| t.softmax_last_dim(x));
    unary_case("transpose", -1.0, 1.0, |t, x| t.transpose(x));
    unary_case("reshape", -1.0, 1.0, |t, x| t.reshape(x, &[7, 5]));
    unary_case("slice_rows", -1.0, 1.0, |t, x| t.slice_rows(x, 1, 3));
    unary_case("slice_cols", -1.0, 1.0, |t, x| t.slice_cols(x, 2, 4));
}

#[test]
fn relu_away_from_the_kink() {
    // values kept at least 0.1 from zero so ±h never crosses it
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f64> = (0..35)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..2.0);
            if rng.random::<bool>() { v } else { -v }
        })
        .collect();
    let mut ps = ParamStore::new();
    let x = ps.add("x", Tensor::new(vec![5, 7], data).unwrap()).unwrap();
    check("relu", &ps, |t| {
        let xv = t.param(x);
        let y = t.relu(xv)?;
        project(t, y, 5)
    });
}

#[test]
fn binary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut ps = ParamStore::new();
    let a = ps.add("a", rand_tensor(&mut rng, &[5, 7], -1.0, 1.0)).unwrap();
    let b = ps.add("b", rand_tensor(&mut rng, &[5, 7], -1.0, 1.0)).unwrap();
    check("add", &ps, |t| {
        let (x, y) = (t.param(a), t.param(b));
        let z = t.add(x, y)?;
        project(t, z, 1)
    });
    check("sub", &ps, |t| {
        let (x, y) = (t.param(a), t.param(b));
        let z = t.sub(x, y)?;
        project(t, z, 2)
    });
    check("mul", &ps, |t| {
        let (x, y) = (t.param(a), t.param(b));
        let z = t.mul(x, y)?;
        project(t, z, 3)
    });
    check("concat_cols", &ps, |t| {
        let (x, y) = (t.param(a), t.param(b));
        let z = t.concat_cols(&[x, y, x])?;
        project(t, z, 4)
    });
    check("concat_rows", &ps, |t| {
        let (x, y) = (t.param(a), t.param(b));
        let z = t.concat_rows(&[y, x])?;
        project(t, z, 5)
    });
}

#[test]
fn matrix_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut ps = ParamStore::new();
    let x = ps.add("x", rand_tensor(&mut rng, &[5, 7], -1.0, 1.0)).unwrap();
    let w = ps.add("w", rand_tensor(&mut rng, &[7, 4], -1.0, 1.0)).unwrap();
    let b = ps.add("b", rand_tensor(&mut rng, &[4], -1.0, 1.0)).unwrap();
    let tile = ps.add("tile", rand_tensor(&mut rng, &[1, 7], -1.0, 1.0)).unwrap();
    check("matmul", &ps, |t| {
        let (xv, wv) = (t.param(x), t.param(w));
        let y = t.matmul(xv, wv)?;
        project(t, y, 1)
    });
    check("affine", &ps, |t| {
        let (xv, wv, bv) = (t.param(x), t.param(w), t.param(b));
        let y = t.affine(xv, wv, bv)?;
        project(t, y, 2)
    });
    check("add_tiled", &ps, |t| {
        let (xv, tv) = (t.param(x), t.param(tile));
        let y = t.add_tiled(xv, tv)?;
        project(t, y, 3)
    });
}

#[test]
fn linear_model_is_exact_to_rounding() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut ps = ParamStore::new();
    let w = ps.add("w", rand_tensor(&mut rng, &[7, 3], -1.0, 1.0)).unwrap();
    let b = ps.add("b", rand_tensor(&mut rng, &[3], -1.0, 1.0)).unwrap();
    let input = rand_tensor(&mut rng, &[5, 7], -1.0, 1.0);
    let cfg = GradCheckConfig { tolerance: 1e-6, ..Default::default() };
    let report = grad_check(
        &ps,
        |t| {
            let x = t.input(input.clone())?;
            let (wv, bv) = (t.param(w), t.param(b));
            let y = t.affine(x, wv, bv)?;
            project(t, y, 7)
        },
        &cfg,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.worst);
    assert!(report.max_rel_error < 1e-6);
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut ps = ParamStore::new();
    let x = ps.add("x", rand_tensor(&mut rng, &[5, 7], -2.0, 2.0)).unwrap();
    let g = ps.add("g", rand_tensor(&mut rng, &[7], 0.5, 1.5)).unwrap();
    let b = ps.add("b", rand_tensor(&mut rng, &[7], -0.5, 0.5)).unwrap();
    check("layer_norm", &ps, |t| {
        let (xv, gv, bv) = (t.param(x), t.param(g), t.param(b));
        let y = t.layer_norm(xv, gv, bv)?;
        project(t, y, 8)
    });
}

#[test]
fn attention_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut ps = ParamStore::new();
    // batch 2, length 5, two heads of width 3
    let q = ps.add("q", rand_tensor(&mut rng, &[10, 6], -1.0, 1.0)).unwrap();
    let k = ps.add("k", rand_tensor(&mut rng, &[10, 6], -1.0, 1.0)).unwrap();
    let v = ps.add("v", rand_tensor(&mut rng, &[10, 6], -1.0, 1.0)).unwrap();
    check("split_merge_heads", &ps, |t| {
        let qv = t.param(q);
        let s = t.split_heads(qv, 2, 5, 2)?;
        let y = t.tanh(s)?;
        let m = t.merge_heads(y, 2, 5, 2)?;
        project(t, m, 1)
    });
    check("bmm", &ps, |t| {
        let (qv, vv) = (t.param(q), t.param(v));
        let a = t.reshape(qv, &[2, 5, 6])?;
        let b = t.reshape(vv, &[2, 6, 5])?;
        let y = t.bmm(a, b, false)?;
        project(t, y, 2)
    });
    check("causal_attention", &ps, |t| {
        let (qv, kv, vv) = (t.param(q), t.param(k), t.param(v));
        let qh = t.split_heads(qv, 2, 5, 2)?;
        let kh = t.split_heads(kv, 2, 5, 2)?;
        let vh = t.split_heads(vv, 2, 5, 2)?;
        let s = t.bmm(qh, kh, true)?;
        let s = t.scale(s, 1.0 / 3f64.sqrt())?;
        let s = t.causal_masked_fill(s)?;
        let p = t.softmax_last_dim(s)?;
        let o = t.bmm(p, vh, false)?;
        let m = t.merge_heads(o, 2, 5, 2)?;
        project(t, m, 3)
    });
}

#[test]
fn gru_cell_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut ps = ParamStore::new();
    let gru = Gru::new(&mut ps, &mut rng, "gru", 7, 4).unwrap();
    let x = ps.add("x", rand_tensor(&mut rng, &[15, 7], -1.0, 1.0)).unwrap();
    let h0 = ps.add("h0", rand_tensor(&mut rng, &[5, 4], -0.5, 0.5)).unwrap();
    // randomize the zero-initialized bias too
    ps.iter_mut().for_each(|p| {
        if p.name == "gru.bias" {
            p.value = rand_tensor(&mut ChaCha8Rng::seed_from_u64(9), &[12], -0.3, 0.3);
        }
    });
    check("gru_three_steps", &ps, |t| {
        let xv = t.param(x);
        let gates = gru.input_gates(t, xv)?;
        let mut h = t.param(h0);
        let mut outs = Vec::new();
        for step in 0..3 {
            let g = t.slice_rows(gates, step * 5, 5)?;
            h = gru.step(t, g, h)?;
            outs.push(h);
        }
        let all = t.concat_rows(&outs)?;
        project(t, all, 4)
    });
}

#[test]
fn mae_loss_gradient_away_from_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let mut ps = ParamStore::new();
    let pred = ps.add("pred", rand_tensor(&mut rng, &[5, 7], -1.0, 1.0)).unwrap();
    let target: Vec<f64> = ps
        .get(pred)
        .value
        .data()
        .iter()
        .map(|&p| p + if rng.random::<bool>() { 0.3 } else { -0.3 })
        .collect();
    let mask: Vec<f64> = (0..35).map(|i| if i % 4 == 0 { 0.0 } else { 1.0 }).collect();
    check("mae_loss", &ps, |t| {
        let p = t.param(pred);
        let tg = t.input(Tensor::new(vec![5, 7], target.clone())?)?;
        let m = t.input(Tensor::new(vec![5, 7], mask.clone())?)?;
        t.mae_loss(p, tg, m)
    });
}

#[test]
fn corrupted_backward_rule_is_detected() {
    fn softplus(x: f64) -> f64 {
        (1.0 + x.exp()).ln()
    }
    fn right(x: f64, _y: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }
    // derivative off by a factor of 1.01
    fn wrong(x: f64, _y: f64) -> f64 {
        1.01 / (1.0 + (-x).exp())
    }
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let mut ps = ParamStore::new();
    let x: ParamId = ps.add("x", rand_tensor(&mut rng, &[5, 7], -2.0, 2.0)).unwrap();
    let run = |deriv: fn(f64, f64) -> f64| {
        grad_check(
            &ps,
            |t| {
                let xv = t.param(x);
                let y = t.unary(xv, softplus, deriv)?;
                project(t, y, 6)
            },
            &GradCheckConfig::default(),
        )
        .unwrap()
    };
    let good = run(right);
    assert!(good.passed(), "{:?}", good.worst);
    let bad = run(wrong);
    assert!(!bad.passed());
    assert!(bad.max_rel_error > 1e-3);
}

#[test]
fn relative_error_definition() {
    assert_eq!(relative_error(2.0, 2.0, 1e-6), 0.0);
    assert!((relative_error(1.0, 0.5, 1e-6) - 0.5).abs() < 1e-15);
}
