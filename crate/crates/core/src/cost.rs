//! Parameter, FLOP and activation-memory accounting.
//!
//! FLOPs follow the MAC convention: one multiply-accumulate is two FLOPs.
//! Convolutions, linear layers and the two attention products are always
//! counted. Elementwise work is excluded unless
//! [`FlopConvention::include_elementwise`] is set, in which case every
//! elementwise output costs:
//!
//! | op                         | FLOPs per output element |
//! |----------------------------|--------------------------|
//! | ReLU, residual add, bias   | 1                        |
//! | BN (eval affine)           | 2                        |
//! | LN                         | 4                        |
//! | GELU                       | 8                        |
//! | softmax (per score)        | 3                        |
//!
//! Weight synthesis is always counted, once per forward and independent of
//! batch size and resolution: row normalization 3 FLOPs per element
//! (square, accumulate, divide), a coefficient mix 3 per output element,
//! a plain average 2 per output element.
//!
//! Activation memory is an analytic model of values kept for the backward
//! pass, per sample:
//!
//! | op        | stored values                     |
//! |-----------|-----------------------------------|
//! | conv      | input                             |
//! | BN        | normalized output                 |
//! | ReLU      | output                            |
//! | linear    | input                             |
//! | LN        | normalized output                 |
//! | attention | Q, K, V and the `H·T²` probabilities |
//! | GELU      | input                             |
//! | add, pool | nothing                           |
//!
//! Synthesized weights and the normalized anchors behind them are counted
//! once as auxiliary memory.

use serde::{Deserialize, Serialize};

use crate::blocks::BlockSpec;
use crate::builder::{build_network, Family, Method, Network, NetworkSpec, Unit};
use crate::error::{ReplError, Result};
use crate::replacement::{CoeffTying, Granularity, Neighbors, Variant, VitSynth};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopConvention {
    pub include_elementwise: bool,
}

/// Exact fraction `num / den`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        let g = gcd(num, den).max(1);
        Ratio {
            num: num / g,
            den: den / g,
        }
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn u(v: usize) -> u64 {
    v as u64
}

/// Trainable coefficient count for `len` groups.
fn coeff_count(len: usize, v: &Variant) -> u64 {
    if v.tying == CoeffTying::Tied || v.neighbors != Neighbors::Both {
        u(len)
    } else {
        2 * u(len)
    }
}

/// `(P, a)`: trainable parameters of the original block and of the
/// computing layer that replaces it.
pub fn param_count_block(spec: BlockSpec, variant: &Variant) -> (u64, u64) {
    let g = |n: usize| match variant.granularity {
        Granularity::Scalar => 1,
        Granularity::Channel => n,
    };
    match spec {
        BlockSpec::Basic { c, q } => {
            let (c, q) = (u(c), u(q));
            (2 * c * c * q * q + 4 * c, coeff_count(g(c as usize), variant) + 2 * c)
        }
        BlockSpec::Bottleneck { c, b, q } => {
            let (cu, bu, qu) = (u(c), u(b), u(q));
            (
                2 * cu * bu + bu * bu * qu * qu + 4 * bu + 2 * cu,
                coeff_count(g(b), variant) + 2 * cu,
            )
        }
        BlockSpec::Vit { d, heads, dff } => {
            let (du, fu) = (u(d), u(dff));
            let p = 2 * du + 4 * (du * du + du) + 2 * du + (fu * du + fu) + (du * fu + du);
            let len = match variant.vit_synth {
                VitSynth::Scalar => 1,
                VitSynth::Headwise => heads,
            };
            let a = if variant.use_attn { coeff_count(len, variant) } else { 0 };
            (p, a)
        }
    }
}

fn conv_params(cin: usize, cout: usize, q: usize) -> u64 {
    u(cin * cout * q * q + 2 * cout)
}

/// Analytic trainable count of the fixed units (stem or embedding,
/// transitions, head).
fn fixed_params(spec: &NetworkSpec) -> u64 {
    let q = spec.kernel;
    let mut n = match spec.family {
        Family::Vit => {
            let v = spec.vit.expect("validated");
            let d = spec.stages[0].width;
            u(d * spec.input[0] * v.patch * v.patch + d + spec.tokens() * d)
        }
        _ => conv_params(spec.input[0], spec.stages[0].width, q),
    };
    for s in 1..spec.stages.len() {
        n += conv_params(spec.stages[s - 1].width, spec.stages[s].width, q);
    }
    let last = spec.stages.last().expect("validated").width;
    n + u(spec.classes * last + spec.classes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteCost {
    pub owner: String,
    pub p: u64,
    pub a: u64,
    /// Per-sample FLOPs of the block and of its computing layer.
    pub f_block: u64,
    pub f_layer: u64,
    pub f_synth: u64,
    pub eta: f64,
    /// Per-sample stored activations (values) of the block and the layer.
    pub s_block: u64,
    pub s_layer: u64,
    /// Attention-probability values inside `s_block`.
    pub s_scores: u64,
    pub m_aux: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub params_e2e: u64,
    pub params_repl: u64,
    pub params_remove_only: u64,
    pub sites: Vec<SiteCost>,
    /// Per-sample forward FLOPs; `flops_repl` includes `f_synth`.
    pub flops_e2e: u64,
    pub flops_repl: u64,
    pub f_synth: u64,
    pub batch: usize,
    pub bytes_per_value: usize,
    pub act_mem_e2e: u64,
    pub act_mem_repl: u64,
    /// `M_e2e − Σ(S_r − S̃_r) + M_aux`, all in bytes.
    pub act_mem_bound: u64,
    pub ratio_params: Ratio,
    pub ratio_flops: Ratio,
}

/// Analytic `(e2e, repl, remove_only)` trainable counts of a spec.
pub fn param_count_spec(spec: &NetworkSpec) -> Result<(u64, u64, u64)> {
    spec.validate()?;
    let plan = crate::builder::stage_removal_plan(spec)?;
    let mut e2e = fixed_params(spec);
    let (mut saved_repl, mut saved_rm) = (0, 0);
    for (s, st) in spec.stages.iter().enumerate() {
        let (p, a) = param_count_block(spec.block_spec(s), &spec.variant);
        e2e += u(st.blocks) * p;
        let r = u(plan.removed[s].len());
        saved_repl += r * (p - a);
        saved_rm += r * p;
    }
    Ok((e2e, e2e - saved_repl, e2e - saved_rm))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub analytic: u64,
    pub walked: u64,
}

/// Analytic count for `net.spec.method` checked against a walk over the
/// registry; disagreement is a consistency error.
pub fn param_count_network(net: &Network) -> Result<ParamCount> {
    let (e2e, repl, rm) = param_count_spec(&net.spec)?;
    let analytic = match net.spec.method {
        Method::E2e => e2e,
        Method::Repl => repl,
        Method::RemoveOnly => rm,
    };
    let walked = u(net.trainable_count());
    if analytic != walked {
        return Err(ReplError::Consistency(format!(
            "analytic parameter count {analytic} != registry count {walked}"
        )));
    }
    Ok(ParamCount { analytic, walked })
}

const EW_SIMPLE: u64 = 1;
const EW_BN: u64 = 2;
const EW_LN: u64 = 4;
const EW_GELU: u64 = 8;
const EW_SOFTMAX: u64 = 3;

fn conv_flops(cin: usize, cout: usize, q: usize, out_pos: usize) -> u64 {
    2 * u(cin * cout * q * q * out_pos)
}

fn linear_flops(rows: usize, din: usize, dout: usize) -> u64 {
    2 * u(rows * din * dout)
}

/// `QKᵀ` and `PV`.
fn attention_flops(t: usize, d: usize) -> u64 {
    2 * 2 * u(t * t * d)
}

/// Per-sample FLOPs of an original block over `pos` positions (pixels or tokens).
pub fn block_flops(spec: BlockSpec, pos: usize, conv: FlopConvention) -> u64 {
    let ew = conv.include_elementwise as u64;
    let p = u(pos);
    match spec {
        BlockSpec::Basic { c, q } => {
            let n = u(c) * p;
            2 * conv_flops(c, c, q, pos) + ew * (2 * EW_BN * n + 2 * EW_SIMPLE * n + EW_SIMPLE * n)
        }
        BlockSpec::Bottleneck { c, b, q } => {
            let (nc, nb) = (u(c) * p, u(b) * p);
            conv_flops(c, b, 1, pos)
                + conv_flops(b, b, q, pos)
                + conv_flops(b, c, 1, pos)
                + ew * (EW_BN * (2 * nb + nc) + EW_SIMPLE * (2 * nb + nc) + EW_SIMPLE * nc)
        }
        BlockSpec::Vit { d, heads, dff } => {
            let (nd, nf) = (u(d) * p, u(dff) * p);
            let scores = u(heads) * p * p;
            4 * linear_flops(pos, d, d)
                + attention_flops(pos, d)
                + linear_flops(pos, d, dff)
                + linear_flops(pos, dff, d)
                + ew * (2 * EW_LN * nd
                    + EW_SOFTMAX * scores
                    + EW_SIMPLE * (4 * nd + nf + nd)
                    + EW_GELU * nf
                    + 2 * EW_SIMPLE * nd)
        }
    }
}

/// Per-sample FLOPs of the computing layer standing in for `spec`.
pub fn layer_flops(spec: BlockSpec, variant: &Variant, pos: usize, conv: FlopConvention) -> u64 {
    let ew = conv.include_elementwise as u64;
    let p = u(pos);
    match spec {
        BlockSpec::Basic { c, q } => {
            let n = u(c) * p;
            conv_flops(c, c, q, pos) + ew * (EW_BN * n + 2 * EW_SIMPLE * n)
        }
        BlockSpec::Bottleneck { c, b, q } => {
            let (nc, nb) = (u(c) * p, u(b) * p);
            conv_flops(c, b, 1, pos)
                + conv_flops(b, b, q, pos)
                + conv_flops(b, c, 1, pos)
                + ew * (EW_SIMPLE * 2 * nb + EW_BN * nc + 2 * EW_SIMPLE * nc)
        }
        BlockSpec::Vit { d, dff, .. } => {
            let (nd, nf) = (u(d) * p, u(dff) * p);
            let mut f = 0;
            if variant.use_attn {
                f += linear_flops(pos, d, d) + ew * (EW_SIMPLE * nd + EW_SIMPLE * nd);
                if variant.vit_synth == VitSynth::Headwise {
                    f += ew * (EW_LN * nd + EW_SIMPLE * nd);
                }
            }
            if variant.use_mlp {
                f += linear_flops(pos, d, dff)
                    + linear_flops(pos, dff, d)
                    + ew * (EW_LN * nd + EW_SIMPLE * (nf + nd) + EW_GELU * nf + EW_SIMPLE * nd);
            }
            f
        }
    }
}

const NORM: u64 = 3;
const MIX: u64 = 3;
const AVG: u64 = 2;

/// Synthesis FLOPs of one computing layer; independent of input size.
pub fn synth_flops(spec: BlockSpec, variant: &Variant) -> u64 {
    match spec {
        BlockSpec::Basic { c, q } => {
            let n = u(c * c * q * q);
            2 * NORM * n + MIX * n
        }
        BlockSpec::Bottleneck { b, q, .. } => {
            let n = u(b * b * q * q);
            2 * NORM * n + MIX * n
        }
        BlockSpec::Vit { d, dff, .. } => {
            let (dd, df) = (u(d * d), u(d * dff));
            let mut f = 0;
            if variant.use_attn {
                f += match variant.vit_synth {
                    VitSynth::Scalar => MIX * dd + MIX * u(d),
                    VitSynth::Headwise => 2 * NORM * dd + MIX * dd + AVG * u(d),
                };
            }
            if variant.use_mlp {
                f += 2 * (2 * NORM * df + AVG * df) + AVG * u(dff + d);
            }
            f
        }
    }
}

/// Stored values per sample of an original block; second item is the
/// attention-probability share.
pub fn block_activations(spec: BlockSpec, pos: usize) -> (u64, u64) {
    let p = u(pos);
    match spec {
        BlockSpec::Basic { c, .. } => {
            let n = u(c) * p;
            // conv1 in, bn1, relu, conv2 in, bn2, final relu
            (6 * n, 0)
        }
        BlockSpec::Bottleneck { c, b, .. } => {
            let (nc, nb) = (u(c) * p, u(b) * p);
            // conv1 in, bn1, relu1, conv2 in, bn2, relu2, conv3 in, bn3, relu
            (nc + 3 * nb + 2 * nb + nb + nc + nc, 0)
        }
        BlockSpec::Vit { d, heads, dff } => {
            let (nd, nf) = (u(d) * p, u(dff) * p);
            let scores = u(heads) * p * p;
            // ln1, qkv inputs (shared), q/k/v, probs, wo input, ln2, mlp1 in, gelu in, mlp2 in
            (nd + nd + 3 * nd + scores + nd + nd + nd + nf + nf, scores)
        }
    }
}

/// Stored values per sample of a computing layer.
pub fn layer_activations(spec: BlockSpec, variant: &Variant, pos: usize) -> u64 {
    let p = u(pos);
    match spec {
        BlockSpec::Basic { c, .. } => {
            let n = u(c) * p;
            // conv in, bn, final relu
            3 * n
        }
        BlockSpec::Bottleneck { c, b, .. } => {
            let (nc, nb) = (u(c) * p, u(b) * p);
            // red in, relu, mid in, relu, exp in, bn, final relu
            nc + nb + nb + nb + nb + nc + nc
        }
        BlockSpec::Vit { d, dff, .. } => {
            let (nd, nf) = (u(d) * p, u(dff) * p);
            let mut s = 0;
            if variant.use_attn {
                s += nd;
                if variant.vit_synth == VitSynth::Headwise {
                    s += nd;
                }
            }
            if variant.use_mlp {
                s += nd + nd + nf + nf;
            }
            s
        }
    }
}

/// Synthesized tensors plus the normalized anchors kept for backward.
pub fn synth_aux(spec: BlockSpec, variant: &Variant) -> u64 {
    match spec {
        BlockSpec::Basic { c, q } => 3 * u(c * c * q * q),
        BlockSpec::Bottleneck { b, q, .. } => 3 * u(b * b * q * q),
        BlockSpec::Vit { d, dff, .. } => {
            let mut n = 0;
            if variant.use_attn {
                n += match variant.vit_synth {
                    VitSynth::Scalar => u(d * d + d),
                    VitSynth::Headwise => 3 * u(d * d) + u(d),
                };
            }
            if variant.use_mlp {
                n += 2 * 3 * u(d * dff) + u(dff + d);
            }
            n
        }
    }
}

/// Per-sample FLOPs and stored values of one unit, given its input
/// spatial extent; returns the output extent as well.
fn unit_cost(
    unit: &Unit,
    spec: &NetworkSpec,
    hw: (usize, usize),
    conv: FlopConvention,
) -> (u64, u64, (usize, usize)) {
    let ew = conv.include_elementwise as u64;
    let pos = hw.0 * hw.1;
    match unit {
        Unit::Stem(c) | Unit::Transition { conv: c, .. } => {
            let pad = c.q / 2;
            let oh = (hw.0 + 2 * pad - c.q) / c.stride + 1;
            let ow = (hw.1 + 2 * pad - c.q) / c.stride + 1;
            let n = u(c.cout * oh * ow);
            let f = conv_flops(c.cin, c.cout, c.q, oh * ow) + ew * (EW_BN + EW_SIMPLE) * n;
            (f, u(c.cin * pos) + 2 * n, (oh, ow))
        }
        Unit::Embed(e) => {
            let t = e.tokens;
            let f = linear_flops(t, e.cin * e.patch * e.patch, e.d) + ew * 2 * EW_SIMPLE * u(t * e.d);
            (f, u(t * e.cin * e.patch * e.patch), (t, 1))
        }
        Unit::Block { stage, .. } => {
            let b = spec.block_spec(*stage);
            (block_flops(b, pos, conv), block_activations(b, pos).0, hw)
        }
        Unit::Computing { stage, .. } => {
            let b = spec.block_spec(*stage);
            (layer_flops(b, &spec.variant, pos, conv), layer_activations(b, &spec.variant, pos), hw)
        }
        Unit::Head(h) => (linear_flops(1, h.din, h.classes) + ew * u(h.classes), u(h.din), hw),
    }
}

/// Per-sample forward FLOPs of every unit and the network's total
/// synthesis cost.
pub fn flop_count(net: &Network, conv: FlopConvention) -> (Vec<(String, u64)>, u64) {
    let spec = &net.spec;
    let mut hw = (spec.input[1], spec.input[2]);
    let mut per_unit = Vec::new();
    let mut synth = 0;
    for unit in &net.units {
        let (f, _, out) = unit_cost(unit, spec, hw, conv);
        hw = out;
        per_unit.push((unit.owner(), f));
        if let Unit::Computing { stage, .. } = unit {
            synth += synth_flops(spec.block_spec(*stage), &spec.variant);
        }
    }
    (per_unit, synth)
}

/// Stored activation values per sample, unit by unit, plus auxiliary
/// synthesis values (batch independent).
pub fn activation_values(net: &Network) -> (Vec<(String, u64)>, u64) {
    let spec = &net.spec;
    let mut hw = (spec.input[1], spec.input[2]);
    let mut per_unit = Vec::new();
    let mut aux = 0;
    for unit in &net.units {
        let (_, s, out) = unit_cost(unit, spec, hw, FlopConvention::default());
        hw = out;
        per_unit.push((unit.owner(), s));
        if let Unit::Computing { stage, .. } = unit {
            aux += synth_aux(spec.block_spec(*stage), &spec.variant);
        }
    }
    (per_unit, aux)
}

/// Activation bytes for batch `b`: `B · Σ per-sample + aux`.
pub fn activation_memory_estimate(net: &Network, batch: usize, bytes_per_value: usize) -> u64 {
    let (per_unit, aux) = activation_values(net);
    let per_sample: u64 = per_unit.iter().map(|(_, s)| s).sum();
    (u(batch) * per_sample + aux) * u(bytes_per_value)
}

fn positions(spec: &NetworkSpec, stage: usize) -> usize {
    match spec.family {
        Family::Vit => spec.tokens(),
        _ => {
            let (h, w) = spec.stage_hw(stage);
            h * w
        }
    }
}

/// Full report comparing the E2E and RepL forms of `spec`.
pub fn cost_report(spec: &NetworkSpec, conv: FlopConvention, batch: usize, bytes_per_value: usize) -> Result<CostReport> {
    let e2e = build_network(&spec.with_method(Method::E2e), 0)?;
    let repl = build_network(&spec.with_method(Method::Repl), 0)?;
    let rm = build_network(&spec.with_method(Method::RemoveOnly), 0)?;
    let pe = param_count_network(&e2e)?.walked;
    let pr = param_count_network(&repl)?.walked;
    let prm = param_count_network(&rm)?.walked;

    let mut sites = Vec::new();
    for unit in &repl.units {
        if let Unit::Computing { stage, .. } = unit {
            let b = spec.block_spec(*stage);
            let pos = positions(spec, *stage);
            let (p, a) = param_count_block(b, &spec.variant);
            let (f_block, f_layer) = (block_flops(b, pos, conv), layer_flops(b, &spec.variant, pos, conv));
            let (s_block, s_scores) = block_activations(b, pos);
            sites.push(SiteCost {
                owner: unit.owner(),
                p,
                a,
                f_block,
                f_layer,
                f_synth: synth_flops(b, &spec.variant),
                eta: f_layer as f64 / f_block as f64,
                s_block,
                s_layer: layer_activations(b, &spec.variant, pos),
                s_scores,
                m_aux: synth_aux(b, &spec.variant),
            });
        }
    }
    let total = |net: &Network| {
        let (per, synth) = flop_count(net, conv);
        per.iter().map(|(_, f)| f).sum::<u64>() + synth
    };
    let flops_e2e = total(&e2e);
    let flops_repl = total(&repl);
    let f_synth = flop_count(&repl, conv).1;
    let bpv = u(bytes_per_value);
    let act_mem_e2e = activation_memory_estimate(&e2e, batch, bytes_per_value);
    let act_mem_repl = activation_memory_estimate(&repl, batch, bytes_per_value);
    let saved: u64 = sites.iter().map(|s| s.s_block - s.s_layer).sum::<u64>() * u(batch) * bpv;
    let aux: u64 = sites.iter().map(|s| s.m_aux).sum::<u64>() * bpv;
    Ok(CostReport {
        params_e2e: pe,
        params_repl: pr,
        params_remove_only: prm,
        sites,
        flops_e2e,
        flops_repl,
        f_synth,
        batch,
        bytes_per_value,
        act_mem_e2e,
        act_mem_repl,
        act_mem_bound: act_mem_e2e - saved + aux,
        ratio_params: Ratio::new(pr, pe),
        ratio_flops: Ratio::new(flops_repl, flops_e2e),
    })
}

/// Inputs of the interval trade-off. `eps_bar`, `pi_max` and `h_max` are
/// measured quantities; the resulting bias column is an empirical proxy
/// and not the true gradient bias.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffInputs {
    pub eta_bar: f64,
    pub eps_bar: f64,
    pub pi_max: f64,
    pub h_max: f64,
    pub c0: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub k: usize,
    /// `C(K) = C0 · [1 − (1 − η̄)/K]`.
    pub cost: f64,
    /// `Π_max · max(H, 1) · (N/K) · ε̄`.
    pub bias_proxy: f64,
    /// Actual `R` of the plan at this `K`.
    pub removed: usize,
}

pub fn interval_tradeoff(spec: &NetworkSpec, ks: &[usize], inp: &TradeoffInputs) -> Result<Vec<TradeoffRow>> {
    let n = spec.depth() as f64;
    ks.iter()
        .map(|&k| {
            if k < 2 {
                return Err(ReplError::Config {
                    key: "k".into(),
                    detail: format!("interval list contains {k}; every K must be at least 2"),
                });
            }
            let kf = k as f64;
            let plan = crate::builder::stage_removal_plan(&NetworkSpec { k, ..spec.clone() })?;
            Ok(TradeoffRow {
                k,
                cost: inp.c0 * (1.0 - (1.0 - inp.eta_bar) / kf),
                bias_proxy: inp.pi_max * inp.h_max.max(1.0) * (n / kf) * inp.eps_bar,
                removed: plan.count(),
            })
        })
        .collect()
}
