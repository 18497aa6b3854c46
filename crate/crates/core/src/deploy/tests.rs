use super::*;
use crate::builder::{build_network, Family, Method, NetworkSpec, StageSpec, VitSpec};
use crate::params::ParamKind;
use crate::replacement::{Variant, VitSynth};
use crate::testutil::{self, randomize, rng};

fn cnn(family: Family, blocks: usize, width: usize, input: [usize; 3]) -> NetworkSpec {
    NetworkSpec {
        family,
        input,
        classes: 5,
        stages: vec![
            StageSpec {
                blocks,
                width,
                mid: None,
            },
            StageSpec {
                blocks: 5,
                width: 2 * width,
                mid: None,
            },
        ],
        kernel: 3,
        vit: None,
        k: 4,
        method: Method::Repl,
        variant: Variant::default(),
    }
}

fn vit(synth: VitSynth, use_mlp: bool) -> NetworkSpec {
    NetworkSpec {
        family: Family::Vit,
        input: [2, 4, 4],
        classes: 5,
        stages: vec![StageSpec {
            blocks: 9,
            width: 8,
            mid: None,
        }],
        kernel: 3,
        vit: Some(VitSpec {
            patch: 2,
            heads: 2,
            mlp_ratio: 2,
        }),
        k: 4,
        method: Method::Repl,
        variant: Variant {
            vit_synth: synth,
            use_mlp,
            ..Variant::default()
        },
    }
}

/// Seed-initialized weights with random statistics, affines, biases and
/// coefficients, so logits stay at a realistic scale.
fn random_net(spec: &NetworkSpec, seed: u64) -> Network {
    let mut net = build_network(spec, seed).unwrap();
    let mut noisy = net.store.clone();
    randomize(&mut noisy, seed + 100);
    for (id, e) in net.store.iter_mut() {
        if e.kind != ParamKind::Weight {
            e.value = noisy.get(id).unwrap().clone();
        }
    }
    net
}

fn inputs(spec: &NetworkSpec, n: usize, seed: u64) -> Tensor {
    let [c, h, w] = spec.input;
    Tensor::randn(&[n, c, h, w], 1.0, &mut rng(seed))
}

fn t(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::from_vec(shape, v.to_vec())
}

#[test]
fn fold_bn_example() {
    let w = t(&[1, 1, 1, 1], &[3.0]);
    let (wf, bf) = fold_bn_conv(
        &w,
        &t(&[1], &[0.0]),
        &t(&[1], &[2.0]),
        &t(&[1], &[0.5]),
        &t(&[1], &[1.0]),
        &t(&[1], &[3.0]),
        1.0,
    )
    .unwrap();
    assert_eq!(wf.data(), &[3.0]);
    assert_eq!(bf.data(), &[-0.5]);
}

#[test]
fn fold_identity_and_zero() {
    let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng(1));
    let b = t(&[3], &[0.1, -0.2, 0.3]);
    let one = Tensor::ones(&[3]);
    let zero = Tensor::zeros(&[3]);
    let (wf, bf) = fold_bn_conv(&w, &b, &one, &zero, &zero, &one, 0.0).unwrap();
    assert_eq!(wf, w);
    assert_eq!(bf, b);
    let (wf, bf) = fold_bn_conv(&Tensor::zeros(&[3, 2, 3, 3]), &zero, &one, &b, &zero, &one, 1e-5).unwrap();
    assert!(wf.data().iter().all(|&v| v == 0.0));
    assert_eq!(bf, b);
    let neg = t(&[3], &[1.0, -0.1, 1.0]);
    assert!(fold_bn_conv(&w, &b, &one, &zero, &zero, &neg, 1e-5).is_err());
    assert!(fold_bn_conv(&w, &Tensor::zeros(&[2]), &one, &zero, &zero, &one, 1e-5).is_err());
}

#[test]
fn fold_bn_matches_naive_composition() {
    let mut g = rng(7);
    let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut g);
    let b = Tensor::randn(&[4], 1.0, &mut g);
    let gamma = Tensor::randn(&[4], 1.0, &mut g);
    let beta = Tensor::randn(&[4], 1.0, &mut g);
    let mean = Tensor::randn(&[4], 1.0, &mut g);
    let var = Tensor::uniform(&[4], 1.0, &mut g).map(|v| v + 1.5);
    let x = Tensor::randn(&[2, 3, 5, 5], 1.0, &mut g);
    let (wf, bf) = fold_bn_conv(&w, &b, &gamma, &beta, &mean, &var, EPS_BN).unwrap();
    let with_bias = |w: &Tensor, b: &Tensor| {
        let y = testutil::conv(&x, w, 1, 1);
        let hw = 25;
        Tensor::from_vec(y.shape(), y.data().iter().enumerate().map(|(i, v)| v + b.data()[(i / hw) % 4]).collect())
    };
    let expect = testutil::bn(&with_bias(&w, &b), &gamma, &beta, Some((&mean, &var)), EPS_BN);
    let got = with_bias(&wf, &bf);
    assert!(got.max_abs_diff(&expect) < 1e-12);
}

#[test]
fn fold_linear_example() {
    let c = (4.0f64).powf(-0.5);
    let (w, b) = fold_linear(&t(&[1, 2], &[2.0, 4.0]), &t(&[1], &[4.0]), c).unwrap();
    assert_eq!(w.data(), &[1.0, 2.0]);
    assert_eq!(b.data(), &[2.0]);
    assert!(fold_linear(&w, &b, 0.0).is_err());
    assert!(fold_linear(&w, &b, -1.0).is_err());
}

fn check_equivalent(spec: &NetworkSpec, seed: u64) -> DeployModel<f64> {
    let net = random_net(spec, seed);
    let dep = export_deploy(&net, Mode::Eval).unwrap();
    let x = inputs(spec, 100, seed + 1);
    let diff = equivalence_check(&net, &dep, &x).unwrap();
    assert!(diff <= 1e-12, "{:?}: {diff}", spec.family);
    assert!(dep.provenance_complete());
    assert!(dep.op_count() < dynamic_op_count(&net).unwrap());
    dep
}

#[test]
fn cnn_equivalence() {
    check_equivalent(&cnn(Family::ResnetBasic, 9, 4, [3, 6, 6]), 1);
    let mut s = cnn(Family::ResnetBottleneck, 9, 8, [3, 4, 4]);
    s.stages[1].blocks = 6;
    check_equivalent(&s, 2);
}

#[test]
fn vit_equivalence() {
    for (i, synth) in [VitSynth::Scalar, VitSynth::Headwise].into_iter().enumerate() {
        for mlp in [false, true] {
            check_equivalent(&vit(synth, mlp), 10 + i as u64);
        }
    }
}

#[test]
fn no_removals_equivalence() {
    let mut s = cnn(Family::ResnetBasic, 4, 4, [1, 4, 4]);
    s.stages[1].blocks = 3;
    let net = random_net(&s, 3);
    assert_eq!(net.computing_layers().count(), 0);
    let dep = export_deploy(&net, Mode::Eval).unwrap();
    assert!(equivalence_check(&net, &dep, &inputs(&s, 10, 4)).unwrap() <= 1e-12);
}

#[test]
fn single_precision_path() {
    for spec in [cnn(Family::ResnetBasic, 9, 4, [3, 6, 6]), vit(VitSynth::Headwise, true)] {
        let net = random_net(&spec, 5);
        let dep32: DeployModel<f32> = export_deploy(&net, Mode::Eval).unwrap().cast();
        // inputs representable in f32 so only arithmetic error remains
        let x = inputs(&spec, 100, 7).round_f32();
        let diff = equivalence_check(&net, &dep32, &x).unwrap();
        let scale = net.logits(&x, Mode::Eval).unwrap().data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        assert!(diff / scale <= 1e-5, "{diff} at scale {scale}");
    }
}

#[test]
fn export_requires_eval_and_is_deterministic() {
    let spec = vit(VitSynth::Headwise, true);
    let net = random_net(&spec, 8);
    assert!(matches!(export_deploy(&net, Mode::Train), Err(ReplError::InvalidArgument { .. })));
    let a = export_deploy(&net, Mode::Eval).unwrap();
    let b = export_deploy(&net, Mode::Eval).unwrap();
    assert_eq!(a, b);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn deploy_has_no_synthesis_inputs() {
    let spec = cnn(Family::ResnetBasic, 9, 4, [1, 4, 4]);
    let net = random_net(&spec, 9);
    let mut dep = export_deploy(&net, Mode::Eval).unwrap();
    let mut arrays = 0;
    dep.visit_arrays_mut(&mut |a| {
        assert_eq!(a.data.len(), a.len());
        arrays += 1;
    });
    // stem, transition, head: 2 + 2 + 2; blocks: 2 convs · 2; computing: 2
    let blocks = net.units.iter().filter(|u| matches!(u, Unit::Block { .. })).count();
    let layers = net.computing_layers().count();
    assert_eq!(arrays, 6 + 4 * blocks + 2 * layers);
    // the computing layer's conv names its anchors and coefficients
    let prov = dep.provenance().concat();
    assert!(prov.iter().any(|s| s.ends_with(".alpha")));
}

#[test]
fn forward_rejects_bad_input() {
    let spec = cnn(Family::ResnetBasic, 5, 4, [1, 4, 4]);
    let dep = export_deploy(&random_net(&spec, 1), Mode::Eval).unwrap();
    assert!(dep.forward(2, &[0.0f64; 16]).is_err());
}
