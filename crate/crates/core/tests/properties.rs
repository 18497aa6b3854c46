//! Property tests for the structural invariants.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use repl_core::analysis::best_fit_coeffs;
use repl_core::autodiff::{grad_check_report, Grouping, Mode, Tape};
use repl_core::blocks::{init_block, BlockSpec, EPS_BN};
use repl_core::builder::{build_network, removal_set, NetworkSpec};
use repl_core::cost::{block_flops, layer_flops, param_count_block, FlopConvention};
use repl_core::deploy::{equivalence_check, export_deploy, fold_bn_conv};
use repl_core::harness::checkpoint::{decode, encode_dynamic, Checkpoint};
use repl_core::harness::config::parse_config;
use repl_core::harness::metrics::{parse_record, Record, RunId};
use repl_core::builder::Method;
use repl_core::replacement::{CoeffTying, ComputingLayer, Granularity, Variant};
use repl_core::tensor::Tensor;
use repl_core::trainer::{epoch_order, Metrics};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn variant() -> impl Strategy<Value = Variant> {
    (any::<bool>(), any::<bool>()).prop_map(|(tied, channel)| Variant {
        tying: if tied { CoeffTying::Tied } else { CoeffTying::Independent },
        granularity: if channel { Granularity::Channel } else { Granularity::Scalar },
        ..Variant::default()
    })
}

fn block_spec() -> impl Strategy<Value = BlockSpec> {
    prop_oneof![
        (1usize..7, prop_oneof![Just(1usize), Just(3)]).prop_map(|(c, q)| BlockSpec::Basic { c, q }),
        (1usize..7, 1usize..5, prop_oneof![Just(1usize), Just(3)])
            .prop_map(|(c, b, q)| BlockSpec::Bottleneck { c, b, q }),
        (1usize..4, 1usize..4, 0usize..9).prop_map(|(h, dh, extra)| BlockSpec::Vit { d: h * dh, heads: h, dff: h * dh + extra }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn removal_set_keeps_both_neighbors(l in 1usize..200, k in 2usize..20) {
        let r = removal_set(l, k).unwrap();
        prop_assert_eq!(r.len(), (l - 1) / k);
        for &i in &r {
            prop_assert!(i % k == 0 && i > 0 && i < l);
            prop_assert!(!r.contains(&(i - 1)) && !r.contains(&(i + 1)));
        }
    }

    #[test]
    fn removal_set_rejects_small_k(l in 1usize..50, k in 0usize..2) {
        prop_assert!(removal_set(l, k).is_err());
    }

    #[test]
    fn epoch_order_is_a_deterministic_permutation(n in 0usize..300, seed: u64, epoch in 0usize..50) {
        let a = epoch_order(n, seed, epoch);
        prop_assert_eq!(&a, &epoch_order(n, seed, epoch));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn basic_layer_costs_half_a_block(c in 1usize..64, q in prop_oneof![Just(1usize), Just(3), Just(5)], pos in 1usize..1024, v in variant()) {
        let spec = BlockSpec::Basic { c, q };
        let conv = FlopConvention::default();
        prop_assert_eq!(2 * layer_flops(spec, &v, pos, conv), block_flops(spec, pos, conv));
    }

    #[test]
    fn analytic_params_match_registry(spec in block_spec(), v in variant(), seed in 0u64..1000) {
        let (prev, mut store) = init_block(spec, "p", seed).unwrap();
        let p = store.trainable_count() as u64;
        let (next, s2) = init_block(spec, "n", seed + 1).unwrap();
        store.absorb(s2);
        let layer = ComputingLayer::between("c", &prev, &next, &v).unwrap();
        layer.init(&mut store);
        let a: u64 = layer
            .param_ids()
            .iter()
            .filter(|id| store.is_trainable(id))
            .map(|id| store.get(id).unwrap().len() as u64)
            .sum();
        prop_assert_eq!(param_count_block(spec, &v), (p, a));
    }

    #[test]
    fn folded_conv_matches_conv_then_bn(co in 1usize..5, ci in 1usize..4, q in prop_oneof![Just(1usize), Just(3)], seed: u64) {
        let mut g = rng(seed);
        let w = Tensor::randn(&[co, ci, q, q], 1.0, &mut g);
        let b = Tensor::randn(&[co], 1.0, &mut g);
        let gamma = Tensor::randn(&[co], 1.0, &mut g);
        let beta = Tensor::randn(&[co], 1.0, &mut g);
        let mean = Tensor::randn(&[co], 1.0, &mut g);
        let var = Tensor::uniform(&[co], 1.0, &mut g).map(|v| v + 1.5);
        let x = Tensor::randn(&[2, ci, 4, 4], 1.0, &mut g);
        let conv = |w: &Tensor, b: &Tensor| {
            let mut t = Tape::new();
            let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
            let y = t.conv2d(xv, wv, 1, q / 2).unwrap();
            let mut out = t.value(y).clone();
            let hw = 16;
            out.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += b.data()[(i / hw) % co]);
            out
        };
        let hw = 16;
        let y = conv(&w, &b);
        let expect: Vec<f64> = y.data().iter().enumerate().map(|(i, v)| {
            let c = (i / hw) % co;
            gamma.data()[c] * (v - mean.data()[c]) / (var.data()[c] + EPS_BN).sqrt() + beta.data()[c]
        }).collect();
        let (wf, bf) = fold_bn_conv(&w, &b, &gamma, &beta, &mean, &var, EPS_BN).unwrap();
        let diff = conv(&wf, &bf).max_abs_diff(&Tensor::from_vec(y.shape(), expect));
        prop_assert!(diff <= 1e-12, "{}", diff);
    }

    #[test]
    fn planted_coefficients_are_recovered(a in -3.0f64..3.0, b in -3.0f64..3.0, rows in 2usize..6, cols in 2usize..9, seed: u64) {
        let mut g = rng(seed);
        let prev = Tensor::randn(&[rows, cols], 1.0, &mut g);
        let next = Tensor::randn(&[rows, cols], 1.0, &mut g);
        let target = prev.zip_map(&next, |p, n| a * p + b * n).unwrap();
        let f = best_fit_coeffs(&target, &prev, &next, false, Grouping::Scalar).unwrap();
        prop_assert!(!f.rank_deficient);
        prop_assert!((f.alpha[0] - a).abs() < 1e-8 && (f.beta[0] - b).abs() < 1e-8);
        prop_assert!(f.residual < 1e-10);
    }

    #[test]
    fn linear_gradients_match_differences(n in 1usize..4, din in 1usize..6, dout in 1usize..6, seed: u64) {
        let mut g = rng(seed);
        let w = Tensor::randn(&[dout, din], 1.0, &mut g);
        let r = Tensor::randn(&[n, dout], 1.0, &mut g);
        let x = Tensor::randn(&[n, din], 1.0, &mut g);
        // mixed tolerance: where the slope vanishes, difference roundoff
        // dominates any relative measure
        let rep = grad_check_report(|t, xv| {
            let wv = t.constant(w.clone());
            let y = t.linear(xv, wv, None)?;
            let y = t.gelu(y);
            let rv = t.constant(r.clone());
            let m = t.mul(y, rv)?;
            Ok(t.sum(m))
        }, &x, 1e-5).unwrap();
        for (a, n) in rep.analytic.iter().zip(&rep.numeric) {
            prop_assert!((a - n).abs() <= 1e-7 * a.abs().max(1.0), "{} vs {}", a, n);
        }
    }

    #[test]
    fn epoch_override_wins(epochs in 1usize..1000) {
        let cfg = parse_config("[model]\nfamily = \"resnet_basic\"\ninput = [1, 4, 4]\nclasses = 2\nstages = [{ blocks = 2, width = 2 }]\n[data]\nkind = \"synthetic\"\nshape = [1, 4, 4]\nclasses = 2\n", &[("train.epochs".into(), epochs.to_string())]).unwrap();
        prop_assert_eq!(cfg.train.epochs, epochs);
    }

    #[test]
    fn epoch_records_round_trip(loss in -1e6f64..1e6, top1 in 0.0f64..1.0, epoch in 0usize..500, seed: u64, k in 2usize..9) {
        let m = Metrics { epoch, split: "train".into(), loss, top1, top5: None, wall_seconds: None, params: 7, flops: 11 };
        let rec = Record::Epoch {
            run: RunId { method: Method::Repl, variant: "default".into(), k, seed },
            train: m.clone(),
            test: Metrics { split: "test".into(), ..m },
        };
        let line = serde_json::to_string(&rec).unwrap();
        prop_assert_eq!(parse_record(&line).unwrap(), rec);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn checkpoints_round_trip_bitwise(blocks in 2usize..7, width in 1usize..5, k in 2usize..4, seed in 0u64..1000, epoch in 0usize..9) {
        let spec: NetworkSpec = toml::from_str(&format!(
            "family = \"resnet_basic\"\ninput = [1, 4, 4]\nclasses = 3\nstages = [{{ blocks = {blocks}, width = {width} }}]\nk = {k}"
        )).unwrap();
        let net = build_network(&spec, seed).unwrap();
        let bytes = encode_dynamic(&net, None, epoch).unwrap();
        let Checkpoint::Dynamic(st) = decode(&bytes).unwrap() else { panic!("flavor") };
        prop_assert_eq!(st.epoch, epoch);
        prop_assert!(st.net.store == net.store);
        prop_assert_eq!(encode_dynamic(&st.net, None, epoch).unwrap(), bytes);
    }

    #[test]
    fn deploy_matches_dynamic(blocks in 2usize..7, width in 1usize..5, k in 2usize..4, seed in 0u64..1000) {
        let spec: NetworkSpec = toml::from_str(&format!(
            "family = \"resnet_basic\"\ninput = [2, 4, 4]\nclasses = 3\nstages = [{{ blocks = {blocks}, width = {width} }}]\nk = {k}"
        )).unwrap();
        let net = build_network(&spec, seed).unwrap();
        let x = Tensor::randn(&[5, 2, 4, 4], 1.0, &mut rng(seed));
        let dm = export_deploy(&net, Mode::Eval).unwrap();
        prop_assert!(equivalence_check(&net, &dm, &x).unwrap() <= 1e-12);
    }
}
