//! Neighbor-parameter synthesis and the computing layers that stand in for
//! removed blocks.
//!
//! A computing layer owns only its mixing coefficients (and, for CNNs, a
//! batch norm). Its operator is re-synthesized on every forward from the
//! *current* weights of the neighboring retained blocks, read through
//! `stop_gradient` so those anchors train only through their own blocks.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Grouping, Mode, Tape, Var};
use crate::blocks::{Block, BnIds, LinearIds, LnIds, EPS_LN};
use crate::error::{ReplError, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{ParamId, Tensor};

/// Guard added under the square root of both kernel normalizations.
pub const EPS_SYNTH: f64 = 1e-5;
/// Initial value of every mixing coefficient.
pub const COEFF_INIT: f64 = 0.5;

/// Which neighbors contribute to the synthesized operator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Neighbors {
    #[default]
    Both,
    PrevOnly,
    NextOnly,
}

/// Two free coefficients, or one with `beta = 1 - alpha`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoeffTying {
    #[default]
    Independent,
    Tied,
}

/// Coefficient extent of CNN computing layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Scalar,
    #[default]
    Channel,
}

/// ViT projection synthesis: raw anchors with one coefficient pair, or
/// row-normalized anchors mixed per head behind the previous block's LN.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VitSynth {
    Scalar,
    #[default]
    Headwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Variant {
    pub neighbors: Neighbors,
    pub tying: CoeffTying,
    pub granularity: Granularity,
    pub vit_synth: VitSynth,
    pub use_attn: bool,
    pub use_mlp: bool,
}

impl Default for Variant {
    fn default() -> Self {
        Variant {
            neighbors: Neighbors::Both,
            tying: CoeffTying::Independent,
            granularity: Granularity::Channel,
            vit_synth: VitSynth::Headwise,
            use_attn: true,
            use_mlp: true,
        }
    }
}

impl Variant {
    pub fn validate(&self) -> Result<()> {
        if self.tying == CoeffTying::Tied && self.neighbors != Neighbors::Both {
            return Err(ReplError::Config {
                key: "variant.tying".into(),
                detail: "a tied coefficient pair needs both neighbors".into(),
            });
        }
        Ok(())
    }
}

/// Learnable `alpha`/`beta` of one computing layer.
///
/// With [`CoeffTying::Tied`] only `alpha` is stored. With a one-sided
/// [`Neighbors`] setting the unused coefficient is stored frozen at zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthCoeffs {
    pub alpha: ParamId,
    pub beta: Option<ParamId>,
    pub len: usize,
    pub neighbors: Neighbors,
}

impl SynthCoeffs {
    pub fn new(owner: &str, len: usize, variant: &Variant) -> Self {
        SynthCoeffs {
            alpha: ParamId::new(owner, "alpha"),
            beta: (variant.tying == CoeffTying::Independent).then(|| ParamId::new(owner, "beta")),
            len,
            neighbors: variant.neighbors,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        let put = |store: &mut ParamStore, id: &ParamId, live: bool| {
            if live {
                store.insert(id.clone(), Tensor::full(&[self.len], COEFF_INIT), ParamKind::Coeff);
            } else {
                store.insert_frozen(id.clone(), Tensor::zeros(&[self.len]), ParamKind::Coeff);
            }
        };
        put(store, &self.alpha, self.neighbors != Neighbors::NextOnly);
        if let Some(b) = &self.beta {
            put(store, b, self.neighbors != Neighbors::PrevOnly);
        }
    }

    /// `(alpha, beta)` on the tape; a tied beta is `1 - alpha`.
    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<(Var, Var)> {
        let a = tape.param(store, &self.alpha)?;
        let b = match &self.beta {
            Some(id) => tape.param(store, id)?,
            None => {
                let neg = tape.scale(a, -1.0);
                tape.add_scalar(neg, 1.0)
            }
        };
        Ok((a, b))
    }

    pub fn values(&self, store: &ParamStore) -> Result<(Tensor, Tensor)> {
        let a = store.get(&self.alpha)?.clone();
        let b = match &self.beta {
            Some(id) => store.get(id)?.clone(),
            None => a.map(|v| 1.0 - v),
        };
        Ok((a, b))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.alpha.clone()).chain(self.beta.clone()).collect()
    }
}

fn grouping_for(len: usize) -> Grouping {
    if len == 1 {
        Grouping::Scalar
    } else {
        Grouping::Leading
    }
}

fn check_same(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(ReplError::shape(
            op,
            "anchor shape",
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    Ok(())
}

/// `alpha ⊙ a + beta ⊙ b` under a coefficient grouping.
pub fn mix(tape: &mut Tape, a: Var, b: Var, alpha: Var, beta: Var, grouping: Grouping) -> Result<Var> {
    let sa = tape.group_scale(a, alpha, grouping)?;
    let sb = tape.group_scale(b, beta, grouping)?;
    tape.add(sa, sb)
}

/// Per-output-channel kernel normalization `W[c] / sqrt(Σ W[c]² + eps)`.
pub fn normalize_conv_kernel(w: &Tensor, eps: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(w.clone());
    let n = tape.row_normalize(v, eps)?;
    Ok(tape.value(n).clone())
}

/// Per-row normalization of a `[dout, din]` matrix.
pub fn normalize_linear_rows(w: &Tensor, eps: f64) -> Result<Tensor> {
    if w.rank() != 2 {
        return Err(ReplError::shape("normalize_linear_rows", "rank", format!("{:?}", w.shape())));
    }
    normalize_conv_kernel(w, eps)
}

fn synth_kernel(
    tape: &mut Tape,
    op: &'static str,
    prev: Var,
    next: Var,
    alpha: Var,
    beta: Var,
    eps: f64,
) -> Result<Var> {
    check_same(tape, op, prev, next)?;
    let np = tape.row_normalize(prev, eps)?;
    let nn = tape.row_normalize(next, eps)?;
    let g = grouping_for(tape.value(alpha).len());
    mix(tape, np, nn, alpha, beta, g)
}

/// Channel-wise synthesis `Ŵ[c] = α[c]·norm(prev)[c] + β[c]·norm(next)[c]`.
///
/// The anchors are expected to be stop-gradiented by the caller; the
/// result is differentiable in the coefficients.
pub fn synth_basic_kernel(tape: &mut Tape, prev: Var, next: Var, alpha: Var, beta: Var, eps: f64) -> Result<Var> {
    synth_kernel(tape, "synth_basic_kernel", prev, next, alpha, beta, eps)
}

/// Middle-kernel synthesis of the bottleneck layer; same contract as
/// [`synth_basic_kernel`] at the bottleneck width.
pub fn synth_bottleneck_mid(tape: &mut Tape, prev: Var, next: Var, alpha: Var, beta: Var, eps: f64) -> Result<Var> {
    synth_kernel(tape, "synth_bottleneck_mid", prev, next, alpha, beta, eps)
}

/// Output-projection synthesis. Scalar mode mixes raw anchors and biases
/// with one pair; headwise mode mixes row-normalized anchors per column
/// group and averages the biases.
#[allow(clippy::too_many_arguments)]
pub fn synth_vit_proj(
    tape: &mut Tape,
    w_prev: Var,
    w_next: Var,
    b_prev: Var,
    b_next: Var,
    alpha: Var,
    beta: Var,
    mode: VitSynth,
    heads: usize,
    eps: f64,
) -> Result<(Var, Var)> {
    check_same(tape, "synth_vit_proj", w_prev, w_next)?;
    check_same(tape, "synth_vit_proj", b_prev, b_next)?;
    match mode {
        VitSynth::Scalar => {
            let w = mix(tape, w_prev, w_next, alpha, beta, Grouping::Scalar)?;
            let b = mix(tape, b_prev, b_next, alpha, beta, Grouping::Scalar)?;
            Ok((w, b))
        }
        VitSynth::Headwise => {
            let np = tape.row_normalize(w_prev, eps)?;
            let nn = tape.row_normalize(w_next, eps)?;
            let w = mix(tape, np, nn, alpha, beta, Grouping::ColumnHeads { heads })?;
            let s = tape.add(b_prev, b_next)?;
            Ok((w, tape.scale(s, 0.5)))
        }
    }
}

/// Fixed half-averages of the row-normalized neighbor MLP weights and of
/// their raw biases. Returns `(W1, b1, W2, b2)`.
pub fn synth_vit_mlp(tape: &mut Tape, prev: [Var; 4], next: [Var; 4], eps: f64) -> Result<[Var; 4]> {
    let mut out = [prev[0]; 4];
    for i in 0..4 {
        check_same(tape, "synth_vit_mlp", prev[i], next[i])?;
        let (p, n) = if i % 2 == 0 {
            (tape.row_normalize(prev[i], eps)?, tape.row_normalize(next[i], eps)?)
        } else {
            (prev[i], next[i])
        };
        let s = tape.add(p, n)?;
        out[i] = tape.scale(s, 0.5);
    }
    Ok(out)
}

/// Binds an anchor and cuts its gradient.
fn anchor(tape: &mut Tape, store: &ParamStore, id: &ParamId) -> Result<Var> {
    let v = tape.param(store, id)?;
    Ok(tape.stop_gradient(v))
}

/// `ReLU(x + BN_r(conv(x, Ŵ)))`, `Ŵ` from block r−1's `conv2` and block
/// r+1's `conv1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComputingBasic {
    pub c: usize,
    pub q: usize,
    pub prev: ParamId,
    pub next: ParamId,
    pub coeffs: SynthCoeffs,
    pub bn: BnIds,
}

/// `ReLU(x + BN_r(W_exp ∗ ReLU(Ŵ_mid ∗ ReLU(W_red ∗ x))))` with
/// `W_red` = block r−1's `conv1`, `W_exp` = block r+1's `conv3` and
/// `Ŵ_mid` synthesized from both neighbors' `conv2`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComputingBottleneck {
    pub c: usize,
    pub b: usize,
    pub q: usize,
    pub red: ParamId,
    pub mid_prev: ParamId,
    pub mid_next: ParamId,
    pub exp: ParamId,
    pub coeffs: SynthCoeffs,
    pub bn: BnIds,
}

/// Residual token-wise replacement branches: a synthesized output
/// projection, then a synthesized MLP, each independently switchable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComputingVit {
    pub d: usize,
    pub heads: usize,
    pub synth: VitSynth,
    pub use_attn: bool,
    pub use_mlp: bool,
    pub coeffs: Option<SynthCoeffs>,
    pub proj_prev: LinearIds,
    pub proj_next: LinearIds,
    pub ln1_prev: LnIds,
    pub mlp1_prev: LinearIds,
    pub mlp2_prev: LinearIds,
    pub mlp1_next: LinearIds,
    pub mlp2_next: LinearIds,
    pub ln2_prev: LnIds,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ComputingLayer {
    Basic(ComputingBasic),
    Bottleneck(ComputingBottleneck),
    Vit(ComputingVit),
}

/// Synthesized operator values of one computing layer.
#[derive(Clone, Debug, PartialEq)]
pub enum Synthesized {
    Basic { w: Tensor },
    Bottleneck { red: Tensor, mid: Tensor, exp: Tensor },
    Vit {
        /// `(Ŵ, b̂)` of the projection branch.
        proj: Option<(Tensor, Tensor)>,
        /// `(Ŵ1, b̂1, Ŵ2, b̂2)` of the MLP branch.
        mlp: Option<[Tensor; 4]>,
    },
}

impl ComputingVit {
    /// Projection branch `X + Δ`.
    pub fn attn_forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let Some((w, b)) = self.synth_proj(tape, store)? else {
            return Ok(x);
        };
        let delta = match self.synth {
            VitSynth::Scalar => tape.linear(x, w, Some(b))?,
            VitSynth::Headwise => {
                let n = self.ln_anchor(tape, store, &self.ln1_prev, x)?;
                let p = tape.linear(n, w, None)?;
                let p = tape.scale(p, (self.d as f64).powf(-0.5));
                tape.add_trailing(p, b)?
            }
        };
        tape.add(x, delta)
    }

    /// MLP branch `X + Ŵ2·GELU(Ŵ1·LN_{r−1,2}(X) + b̂1) + b̂2`.
    pub fn mlp_forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let Some([w1, b1, w2, b2]) = self.synth_mlp(tape, store)? else {
            return Ok(x);
        };
        let n = self.ln_anchor(tape, store, &self.ln2_prev, x)?;
        let h = tape.linear(n, w1, Some(b1))?;
        let h = tape.gelu(h);
        let delta = tape.linear(h, w2, Some(b2))?;
        tape.add(x, delta)
    }

    fn ln_anchor(&self, tape: &mut Tape, store: &ParamStore, ln: &LnIds, x: Var) -> Result<Var> {
        let g = anchor(tape, store, &ln.gamma)?;
        let b = anchor(tape, store, &ln.beta)?;
        tape.layer_norm(x, g, b, EPS_LN)
    }

    fn synth_proj(&self, tape: &mut Tape, store: &ParamStore) -> Result<Option<(Var, Var)>> {
        let Some(coeffs) = self.coeffs.as_ref().filter(|_| self.use_attn) else {
            return Ok(None);
        };
        let wp = anchor(tape, store, &self.proj_prev.w)?;
        let wn = anchor(tape, store, &self.proj_next.w)?;
        let bp = anchor(tape, store, &self.proj_prev.b)?;
        let bn = anchor(tape, store, &self.proj_next.b)?;
        let (a, b) = coeffs.bind(tape, store)?;
        synth_vit_proj(tape, wp, wn, bp, bn, a, b, self.synth, self.heads, EPS_SYNTH).map(Some)
    }

    fn synth_mlp(&self, tape: &mut Tape, store: &ParamStore) -> Result<Option<[Var; 4]>> {
        if !self.use_mlp {
            return Ok(None);
        }
        let mut bind = |l1: &LinearIds, l2: &LinearIds| -> Result<[Var; 4]> {
            Ok([
                anchor(tape, store, &l1.w)?,
                anchor(tape, store, &l1.b)?,
                anchor(tape, store, &l2.w)?,
                anchor(tape, store, &l2.b)?,
            ])
        };
        let prev = bind(&self.mlp1_prev, &self.mlp2_prev)?;
        let next = bind(&self.mlp1_next, &self.mlp2_next)?;
        synth_vit_mlp(tape, prev, next, EPS_SYNTH).map(Some)
    }
}

impl ComputingLayer {
    /// Layer at a removed position, anchored on the retained neighbors.
    pub fn between(owner: &str, prev: &Block, next: &Block, variant: &Variant) -> Result<Self> {
        if prev.spec() != next.spec() {
            return Err(ReplError::shape(
                "ComputingLayer::between",
                "neighbor spec",
                format!("{:?} vs {:?}", prev.spec(), next.spec()),
            ));
        }
        let coeff_len = |n: usize| match variant.granularity {
            Granularity::Scalar => 1,
            Granularity::Channel => n,
        };
        Ok(match (prev, next) {
            (Block::Basic(p), Block::Basic(n)) => ComputingLayer::Basic(ComputingBasic {
                c: p.c,
                q: p.q,
                prev: p.conv2.clone(),
                next: n.conv1.clone(),
                coeffs: SynthCoeffs::new(owner, coeff_len(p.c), variant),
                bn: BnIds::new(owner, "bn"),
            }),
            (Block::Bottleneck(p), Block::Bottleneck(n)) => ComputingLayer::Bottleneck(ComputingBottleneck {
                c: p.c,
                b: p.b,
                q: p.q,
                red: p.conv1.clone(),
                mid_prev: p.conv2.clone(),
                mid_next: n.conv2.clone(),
                exp: n.conv3.clone(),
                coeffs: SynthCoeffs::new(owner, coeff_len(p.b), variant),
                bn: BnIds::new(owner, "bn"),
            }),
            (Block::Vit(p), Block::Vit(n)) => {
                let len = match variant.vit_synth {
                    VitSynth::Scalar => 1,
                    VitSynth::Headwise => p.heads,
                };
                ComputingLayer::Vit(ComputingVit {
                    d: p.d,
                    heads: p.heads,
                    synth: variant.vit_synth,
                    use_attn: variant.use_attn,
                    use_mlp: variant.use_mlp,
                    coeffs: variant.use_attn.then(|| SynthCoeffs::new(owner, len, variant)),
                    proj_prev: p.o.clone(),
                    proj_next: n.o.clone(),
                    ln1_prev: p.ln1.clone(),
                    mlp1_prev: p.mlp1.clone(),
                    mlp2_prev: p.mlp2.clone(),
                    mlp1_next: n.mlp1.clone(),
                    mlp2_next: n.mlp2.clone(),
                    ln2_prev: p.ln2.clone(),
                })
            }
            _ => unreachable!("specs compared equal"),
        })
    }

    pub fn init(&self, store: &mut ParamStore) {
        match self {
            ComputingLayer::Basic(l) => {
                l.coeffs.init(store);
                l.bn.init(store, l.c);
            }
            ComputingLayer::Bottleneck(l) => {
                l.coeffs.init(store);
                l.bn.init(store, l.c);
            }
            ComputingLayer::Vit(l) => {
                if let Some(c) = &l.coeffs {
                    c.init(store);
                }
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        match self {
            ComputingLayer::Basic(l) => {
                let p = anchor(tape, store, &l.prev)?;
                let n = anchor(tape, store, &l.next)?;
                let (a, b) = l.coeffs.bind(tape, store)?;
                let w = synth_basic_kernel(tape, p, n, a, b, EPS_SYNTH)?;
                let h = tape.conv2d(x, w, 1, l.q / 2)?;
                let y = l.bn.apply(tape, store, h, mode)?;
                let s = tape.add(x, y)?;
                Ok(tape.relu(s))
            }
            ComputingLayer::Bottleneck(l) => {
                let red = anchor(tape, store, &l.red)?;
                let exp = anchor(tape, store, &l.exp)?;
                let p = anchor(tape, store, &l.mid_prev)?;
                let n = anchor(tape, store, &l.mid_next)?;
                let (a, b) = l.coeffs.bind(tape, store)?;
                let mid = synth_bottleneck_mid(tape, p, n, a, b, EPS_SYNTH)?;
                let z = tape.conv2d(x, red, 1, 0)?;
                let z = tape.relu(z);
                let z = tape.conv2d(z, mid, 1, l.q / 2)?;
                let z = tape.relu(z);
                let z = tape.conv2d(z, exp, 1, 0)?;
                let y = l.bn.apply(tape, store, z, mode)?;
                let s = tape.add(x, y)?;
                Ok(tape.relu(s))
            }
            ComputingLayer::Vit(l) => {
                let xs = tape.shape(x);
                if xs.len() != 3 || xs[2] != l.d {
                    return Err(ReplError::shape("computing_vit_forward", "model width", format!("{xs:?}")));
                }
                let y = l.attn_forward(tape, store, x)?;
                l.mlp_forward(tape, store, y)
            }
        }
    }

    /// Runs the synthesis once, outside any training tape.
    pub fn synthesize(&self, store: &ParamStore) -> Result<Synthesized> {
        let mut tape = Tape::new();
        let val = |t: &Tape, v: Var| t.value(v).clone();
        Ok(match self {
            ComputingLayer::Basic(l) => {
                let p = anchor(&mut tape, store, &l.prev)?;
                let n = anchor(&mut tape, store, &l.next)?;
                let (a, b) = l.coeffs.bind(&mut tape, store)?;
                let w = synth_basic_kernel(&mut tape, p, n, a, b, EPS_SYNTH)?;
                Synthesized::Basic { w: val(&tape, w) }
            }
            ComputingLayer::Bottleneck(l) => {
                let p = anchor(&mut tape, store, &l.mid_prev)?;
                let n = anchor(&mut tape, store, &l.mid_next)?;
                let (a, b) = l.coeffs.bind(&mut tape, store)?;
                let mid = synth_bottleneck_mid(&mut tape, p, n, a, b, EPS_SYNTH)?;
                Synthesized::Bottleneck {
                    red: store.get(&l.red)?.clone(),
                    mid: val(&tape, mid),
                    exp: store.get(&l.exp)?.clone(),
                }
            }
            ComputingLayer::Vit(l) => {
                let proj = l.synth_proj(&mut tape, store)?.map(|(w, b)| (val(&tape, w), val(&tape, b)));
                let mlp = l.synth_mlp(&mut tape, store)?.map(|vs| vs.map(|v| val(&tape, v)));
                Synthesized::Vit { proj, mlp }
            }
        })
    }

    /// Neighbor entries read by the synthesis.
    pub fn anchors(&self) -> Vec<ParamId> {
        match self {
            ComputingLayer::Basic(l) => vec![l.prev.clone(), l.next.clone()],
            ComputingLayer::Bottleneck(l) => {
                vec![l.red.clone(), l.mid_prev.clone(), l.mid_next.clone(), l.exp.clone()]
            }
            ComputingLayer::Vit(l) => {
                let mut v = Vec::new();
                if l.use_attn {
                    for lin in [&l.proj_prev, &l.proj_next] {
                        v.extend([lin.w.clone(), lin.b.clone()]);
                    }
                    if l.synth == VitSynth::Headwise {
                        v.extend([l.ln1_prev.gamma.clone(), l.ln1_prev.beta.clone()]);
                    }
                }
                if l.use_mlp {
                    for lin in [&l.mlp1_prev, &l.mlp2_prev, &l.mlp1_next, &l.mlp2_next] {
                        v.extend([lin.w.clone(), lin.b.clone()]);
                    }
                    v.extend([l.ln2_prev.gamma.clone(), l.ln2_prev.beta.clone()]);
                }
                v
            }
        }
    }

    /// Re-points every anchor id through `f`.
    pub fn map_anchors(&mut self, f: impl Fn(&ParamId) -> ParamId) {
        let lin = |l: &mut LinearIds| {
            l.w = f(&l.w);
            l.b = f(&l.b);
        };
        match self {
            ComputingLayer::Basic(l) => {
                l.prev = f(&l.prev);
                l.next = f(&l.next);
            }
            ComputingLayer::Bottleneck(l) => {
                for id in [&mut l.red, &mut l.mid_prev, &mut l.mid_next, &mut l.exp] {
                    *id = f(id);
                }
            }
            ComputingLayer::Vit(l) => {
                for ids in [
                    &mut l.proj_prev,
                    &mut l.proj_next,
                    &mut l.mlp1_prev,
                    &mut l.mlp2_prev,
                    &mut l.mlp1_next,
                    &mut l.mlp2_next,
                ] {
                    lin(ids);
                }
                for ln in [&mut l.ln1_prev, &mut l.ln2_prev] {
                    ln.gamma = f(&ln.gamma);
                    ln.beta = f(&ln.beta);
                }
            }
        }
    }

    /// Entries owned by the layer itself (coefficients, BN).
    pub fn param_ids(&self) -> Vec<ParamId> {
        let bn_ids = |bn: &BnIds| bn.all().into_iter().cloned().collect::<Vec<_>>();
        match self {
            ComputingLayer::Basic(l) => [l.coeffs.param_ids(), bn_ids(&l.bn)].concat(),
            ComputingLayer::Bottleneck(l) => [l.coeffs.param_ids(), bn_ids(&l.bn)].concat(),
            ComputingLayer::Vit(l) => l.coeffs.as_ref().map(SynthCoeffs::param_ids).unwrap_or_default(),
        }
    }
}
