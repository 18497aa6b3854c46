use super::*;
use crate::autodiff::{grad_check, grad_check_param};
use crate::testutil::{self as r, probe, randomize, rng};

fn zero_branch(store: &mut ParamStore) {
    for (id, e) in store.iter_mut() {
        if e.kind == ParamKind::Weight || e.kind == ParamKind::Bias || id.role().ends_with("_beta") {
            e.value = Tensor::zeros(e.value.shape());
        }
        if id.role().starts_with("ln") && id.role().ends_with("_gamma") {
            e.value = Tensor::zeros(e.value.shape());
        }
    }
}

fn run(block: &Block, store: &ParamStore, x: &Tensor, mode: Mode) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = block.forward(&mut tape, store, xv, mode).unwrap();
    tape.value(y).clone()
}

fn g(store: &ParamStore, id: &ParamId) -> Tensor {
    store.get(id).unwrap().clone()
}

fn bn_ref(x: &Tensor, s: &ParamStore, ids: &BnIds, mode: Mode) -> Tensor {
    let (mean, var) = (g(s, &ids.mean), g(s, &ids.var));
    let stats = (mode == Mode::Eval).then_some((&mean, &var));
    r::bn(x, &g(s, &ids.gamma), &g(s, &ids.beta), stats, EPS_BN)
}

fn basic_ref(p: &BasicBlock, s: &ParamStore, x: &Tensor, mode: Mode) -> Tensor {
    let h = r::relu(&bn_ref(&r::conv(x, &g(s, &p.conv1), 1, p.q / 2), s, &p.bn1, mode));
    let u = bn_ref(&r::conv(&h, &g(s, &p.conv2), 1, p.q / 2), s, &p.bn2, mode);
    r::relu(&r::add(x, &u))
}

fn bottleneck_ref(p: &BottleneckBlock, s: &ParamStore, x: &Tensor, mode: Mode) -> Tensor {
    let h = r::relu(&bn_ref(&r::conv(x, &g(s, &p.conv1), 1, 0), s, &p.bn1, mode));
    let h = r::relu(&bn_ref(&r::conv(&h, &g(s, &p.conv2), 1, p.q / 2), s, &p.bn2, mode));
    let u = bn_ref(&r::conv(&h, &g(s, &p.conv3), 1, 0), s, &p.bn3, mode);
    r::relu(&r::add(x, &u))
}

fn vit_ref(p: &VitBlock, s: &ParamStore, x: &Tensor) -> Tensor {
    let lin = |x: &Tensor, l: &LinearIds| r::linear(x, &g(s, &l.w), Some(&g(s, &l.b)));
    let n = r::layer_norm(x, &g(s, &p.ln1.gamma), &g(s, &p.ln1.beta), EPS_LN);
    let a = r::attention(&lin(&n, &p.q), &lin(&n, &p.k), &lin(&n, &p.v), p.heads);
    let y = r::add(x, &lin(&a, &p.o));
    let n = r::layer_norm(&y, &g(s, &p.ln2.gamma), &g(s, &p.ln2.beta), EPS_LN);
    r::add(&y, &lin(&r::gelu(&lin(&n, &p.mlp1)), &p.mlp2))
}

const BASIC: BlockSpec = BlockSpec::Basic { c: 4, q: 3 };
const BOTTLE: BlockSpec = BlockSpec::Bottleneck { c: 8, b: 4, q: 3 };
const VIT: BlockSpec = BlockSpec::Vit { d: 8, heads: 2, dff: 16 };

#[test]
fn cnn_zero_branch_is_relu_and_zero_input_is_zero() {
    for spec in [BASIC, BOTTLE] {
        let (block, mut store) = init_block(spec, "b", 1).unwrap();
        let c = match spec {
            BlockSpec::Basic { c, .. } | BlockSpec::Bottleneck { c, .. } => c,
            _ => unreachable!(),
        };
        let x = Tensor::randn(&[2, c, 5, 5], 1.0, &mut rng(2));
        let x0 = Tensor::zeros(&[2, c, 5, 5]);
        // x = 0 with zero BN shifts gives 0 for any weights
        assert_eq!(run(&block, &store, &x0, Mode::Eval), x0);
        assert_eq!(run(&block, &store, &x0, Mode::Train), x0);
        zero_branch(&mut store);
        for mode in [Mode::Train, Mode::Eval] {
            assert_eq!(run(&block, &store, &x, mode), r::relu(&x));
        }
    }
}

#[test]
fn vit_zero_branch_is_identity() {
    let (block, mut store) = init_block(VIT, "v", 3).unwrap();
    zero_branch(&mut store);
    let x = Tensor::randn(&[2, 5, 8], 1.0, &mut rng(4));
    assert_eq!(run(&block, &store, &x, Mode::Train), x);
}

#[test]
fn blocks_match_straight_line_reference() {
    for seed in 0..3 {
        let x = Tensor::randn(&[2, 4, 5, 5], 1.0, &mut rng(10 + seed));
        let (block, mut store) = init_block(BASIC, "b", seed).unwrap();
        randomize(&mut store, seed);
        let Block::Basic(p) = &block else { unreachable!() };
        for mode in [Mode::Train, Mode::Eval] {
            let d = run(&block, &store, &x, mode).max_abs_diff(&basic_ref(p, &store, &x, mode));
            assert!(d <= 1e-12, "basic {mode:?}: {d}");
        }

        let x = Tensor::randn(&[2, 8, 4, 4], 1.0, &mut rng(20 + seed));
        let (block, mut store) = init_block(BOTTLE, "b", seed).unwrap();
        randomize(&mut store, seed + 100);
        let Block::Bottleneck(p) = &block else { unreachable!() };
        for mode in [Mode::Train, Mode::Eval] {
            let d = run(&block, &store, &x, mode).max_abs_diff(&bottleneck_ref(p, &store, &x, mode));
            assert!(d <= 1e-12, "bottleneck {mode:?}: {d}");
        }

        let x = Tensor::randn(&[2, 6, 8], 1.0, &mut rng(30 + seed));
        let (block, mut store) = init_block(VIT, "v", seed).unwrap();
        randomize(&mut store, seed + 200);
        let Block::Vit(p) = &block else { unreachable!() };
        let d = run(&block, &store, &x, Mode::Train).max_abs_diff(&vit_ref(p, &store, &x));
        assert!(d <= 1e-12, "vit: {d}");
    }
}

#[test]
fn vit_single_token_attention_is_linear() {
    let (block, mut store) = init_block(VIT, "v", 5).unwrap();
    randomize(&mut store, 5);
    let Block::Vit(p) = &block else { unreachable!() };
    let x = Tensor::randn(&[3, 1, 8], 1.0, &mut rng(6));
    // with one token the attention output is just the value projection
    let lin = |x: &Tensor, l: &LinearIds| r::linear(x, &g(&store, &l.w), Some(&g(&store, &l.b)));
    let n = r::layer_norm(&x, &g(&store, &p.ln1.gamma), &g(&store, &p.ln1.beta), EPS_LN);
    let y = r::add(&x, &lin(&lin(&n, &p.v), &p.o));
    let n = r::layer_norm(&y, &g(&store, &p.ln2.gamma), &g(&store, &p.ln2.beta), EPS_LN);
    let expect = r::add(&y, &lin(&r::gelu(&lin(&n, &p.mlp1)), &p.mlp2));
    assert!(run(&block, &store, &x, Mode::Eval).max_abs_diff(&expect) <= 1e-12);
}

#[test]
fn channel_and_width_mismatch_are_errors() {
    let (block, store) = init_block(BASIC, "b", 0).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let err = block.forward(&mut tape, &store, x, Mode::Eval).unwrap_err();
    assert!(err.to_string().contains("channels"), "{err}");

    let (block, store) = init_block(VIT, "v", 0).unwrap();
    let x = tape.constant(Tensor::zeros(&[1, 2, 6]));
    assert!(block.forward(&mut tape, &store, x, Mode::Eval).is_err());

    assert!(BlockSpec::Basic { c: 4, q: 2 }.validate().is_err());
    assert!(BlockSpec::Vit { d: 6, heads: 4, dff: 24 }.validate().is_err());
}

#[test]
fn init_is_deterministic_with_unit_gammas() {
    for spec in [BASIC, BOTTLE, VIT] {
        let (_, a) = init_block(spec, "s0.b1", 9).unwrap();
        let (_, b) = init_block(spec, "s0.b1", 9).unwrap();
        assert_eq!(a, b);
        let (_, c) = init_block(spec, "s0.b2", 9).unwrap();
        assert_ne!(a.iter().map(|(_, e)| &e.value).collect::<Vec<_>>(), c.iter().map(|(_, e)| &e.value).collect::<Vec<_>>());
        for (id, e) in a.iter() {
            if id.role().ends_with("_gamma") {
                assert!(e.value.data().iter().all(|&v| v == 1.0));
            }
            if id.role().ends_with("_beta") {
                assert!(e.value.data().iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn conv_init_std_matches_kaiming() {
    let spec = BlockSpec::Basic { c: 16, q: 3 };
    let expect = (2.0 / (16.0 * 9.0f64)).sqrt();
    for seed in 0..10 {
        let (block, store) = init_block(spec, "b", seed).unwrap();
        let Block::Basic(p) = &block else { unreachable!() };
        let w = store.get(&p.conv1).unwrap();
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let std = (w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        assert!((std / expect - 1.0).abs() < 0.2, "seed {seed}: {std} vs {expect}");
    }
}

/// Finite-difference check of the input gradient and of every trainable
/// parameter, skipping evaluation points where a ReLU sits within reach
/// of its kink.
fn check_block(spec: BlockSpec, shape: &[usize], mode: Mode) {
    let mut checked = 0;
    for seed in 0..40 {
        if checked == 5 {
            break;
        }
        let (block, mut store) = init_block(spec, "b", seed).unwrap();
        randomize(&mut store, seed + 7);
        let x = Tensor::randn(shape, 1.0, &mut rng(seed + 50));
        let f = |tape: &mut Tape, s: &ParamStore, xv: Var| {
            let y = block.forward(tape, s, xv, mode)?;
            probe(tape, y, seed)
        };
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        f(&mut tape, &store, xv).unwrap();
        if tape.relu_margin() < 1e-4 {
            continue;
        }
        let err = grad_check(|t, v| f(t, &store, v), &x, 1e-5).unwrap();
        assert!(err < 1e-5, "{spec:?} seed {seed} input: {err}");
        for (id, _) in store.trainable() {
            if id.role() == "k_b" {
                // softmax is invariant to a per-row shift, so the key bias
                // has an identically zero gradient
                let mut t = Tape::new();
                let xv = t.constant(x.clone());
                let y = f(&mut t, &store, xv).unwrap();
                let gk = t.backward(y).unwrap().params()[id].clone();
                assert!(gk.data().iter().all(|v| v.abs() < 1e-12), "{gk:?}");
                continue;
            }
            let err = grad_check_param(
                |t, s| {
                    let xv = t.constant(x.clone());
                    f(t, s, xv)
                },
                &store,
                id,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "{spec:?} seed {seed} {id}: {err}");
        }
        checked += 1;
    }
    assert_eq!(checked, 5, "not enough kink-free evaluation points");
}

#[test]
fn block_gradients_match_finite_differences() {
    check_block(BASIC, &[2, 4, 4, 4], Mode::Train);
    check_block(BASIC, &[2, 4, 4, 4], Mode::Eval);
    // 4x4 keeps every mid channel partly inactive; a fully active channel
    // makes its beta gradient structurally zero under train-mode BN3, and
    // the relative error then measures pure finite-difference roundoff
    check_block(BOTTLE, &[2, 8, 4, 4], Mode::Train);
    check_block(BOTTLE, &[2, 8, 3, 3], Mode::Eval);
    check_block(VIT, &[2, 4, 8], Mode::Train);
}

