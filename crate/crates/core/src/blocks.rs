//! Backbone blocks (residual basic/bottleneck CNN blocks, pre-norm ViT
//! blocks) and the small fixed units around them (stem, transitions,
//! patch embedding, classifier head).
//!
//! Blocks hold [`ParamId`]s only; tensor values live in a [`ParamStore`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnStats, Mode, Tape, Var};
use crate::error::{ReplError, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{ParamId, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const EPS_BN: f64 = 1e-5;
pub const EPS_LN: f64 = 1e-5;

/// Deterministic per-unit generator: the stream depends only on the run
/// seed and the owner name, so a unit is initialized identically in every
/// network that contains it.
pub fn unit_rng(seed: u64, owner: &str) -> ChaCha8Rng {
    // FNV-1a over the name, then mixed with the seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in owner.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17));
    rng.set_stream(h);
    rng
}

/// Kaiming-uniform tensor for ReLU networks: `U(-b, b)`, `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

/// Ids of one batch norm: affine pair plus running statistics.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BnIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl BnIds {
    pub fn new(owner: &str, name: &str) -> Self {
        BnIds {
            gamma: ParamId::new(owner, &format!("{name}_gamma")),
            beta: ParamId::new(owner, &format!("{name}_beta")),
            mean: ParamId::new(owner, &format!("{name}_mean")),
            var: ParamId::new(owner, &format!("{name}_var")),
        }
    }

    pub fn init(&self, store: &mut ParamStore, c: usize) {
        store.insert(self.gamma.clone(), Tensor::ones(&[c]), ParamKind::NormAffine);
        store.insert(self.beta.clone(), Tensor::zeros(&[c]), ParamKind::NormAffine);
        store.insert(self.mean.clone(), Tensor::zeros(&[c]), ParamKind::Buffer);
        store.insert(self.var.clone(), Tensor::ones(&[c]), ParamKind::Buffer);
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let g = tape.param(store, &self.gamma)?;
        let b = tape.param(store, &self.beta)?;
        let stats = BnStats {
            mean: store.get(&self.mean)?.clone(),
            var: store.get(&self.var)?.clone(),
            ids: Some((self.mean.clone(), self.var.clone())),
        };
        tape.batch_norm(x, g, b, &stats, mode, BN_MOMENTUM, EPS_BN)
    }

    pub fn all(&self) -> [&ParamId; 4] {
        [&self.gamma, &self.beta, &self.mean, &self.var]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LnIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LnIds {
    pub fn new(owner: &str, name: &str) -> Self {
        LnIds {
            gamma: ParamId::new(owner, &format!("{name}_gamma")),
            beta: ParamId::new(owner, &format!("{name}_beta")),
        }
    }

    pub fn init(&self, store: &mut ParamStore, d: usize) {
        store.insert(self.gamma.clone(), Tensor::ones(&[d]), ParamKind::NormAffine);
        store.insert(self.beta.clone(), Tensor::zeros(&[d]), ParamKind::NormAffine);
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, &self.gamma)?;
        let b = tape.param(store, &self.beta)?;
        tape.layer_norm(x, g, b, EPS_LN)
    }
}

/// Weight `[out, in]` and bias `[out]` of a linear layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearIds {
    pub fn new(owner: &str, name: &str) -> Self {
        LinearIds {
            w: ParamId::new(owner, &format!("{name}_w")),
            b: ParamId::new(owner, &format!("{name}_b")),
        }
    }

    pub fn init(&self, store: &mut ParamStore, dout: usize, din: usize, rng: &mut ChaCha8Rng) {
        store.insert(self.w.clone(), kaiming_uniform(&[dout, din], din, rng), ParamKind::Weight);
        store.insert(self.b.clone(), Tensor::zeros(&[dout]), ParamKind::Bias);
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, &self.w)?;
        let b = tape.param(store, &self.b)?;
        tape.linear(x, w, Some(b))
    }
}

/// Shape of one replaceable block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockSpec {
    Basic { c: usize, q: usize },
    Bottleneck { c: usize, b: usize, q: usize },
    Vit { d: usize, heads: usize, dff: usize },
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(ReplError::invalid("BlockSpec", detail));
        match *self {
            BlockSpec::Basic { c, q } | BlockSpec::Bottleneck { c, q, .. } if c == 0 || q % 2 == 0 => {
                bad(format!("need c > 0 and odd q, got c={c}, q={q}"))
            }
            BlockSpec::Bottleneck { b: 0, .. } => bad("bottleneck width must be positive".into()),
            BlockSpec::Vit { d, heads, dff } if heads == 0 || d % heads != 0 || dff < d => {
                bad(format!("need d divisible by heads and dff >= d, got d={d}, H={heads}, dff={dff}"))
            }
            _ => Ok(()),
        }
    }
}

/// `ReLU(x + BN2(conv2(ReLU(BN1(conv1(x))))))`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BasicBlock {
    pub c: usize,
    pub q: usize,
    pub conv1: ParamId,
    pub conv2: ParamId,
    pub bn1: BnIds,
    pub bn2: BnIds,
}

/// `ReLU(x + BN3(conv3(ReLU(BN2(conv2(ReLU(BN1(conv1(x)))))))))` with
/// 1×1 reduction `conv1`, q×q `conv2` and 1×1 expansion `conv3`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BottleneckBlock {
    pub c: usize,
    pub b: usize,
    pub q: usize,
    pub conv1: ParamId,
    pub conv2: ParamId,
    pub conv3: ParamId,
    pub bn1: BnIds,
    pub bn2: BnIds,
    pub bn3: BnIds,
}

/// Pre-norm transformer block: `Y = X + MSA(LN1(X))`, `Y + MLP(LN2(Y))`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VitBlock {
    pub d: usize,
    pub heads: usize,
    pub dff: usize,
    pub ln1: LnIds,
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
    pub ln2: LnIds,
    pub mlp1: LinearIds,
    pub mlp2: LinearIds,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Block {
    Basic(BasicBlock),
    Bottleneck(BottleneckBlock),
    Vit(VitBlock),
}

impl Block {
    pub fn new(spec: BlockSpec, owner: &str) -> Self {
        let id = |role: &str| ParamId::new(owner, role);
        match spec {
            BlockSpec::Basic { c, q } => Block::Basic(BasicBlock {
                c,
                q,
                conv1: id("conv1"),
                conv2: id("conv2"),
                bn1: BnIds::new(owner, "bn1"),
                bn2: BnIds::new(owner, "bn2"),
            }),
            BlockSpec::Bottleneck { c, b, q } => Block::Bottleneck(BottleneckBlock {
                c,
                b,
                q,
                conv1: id("conv1"),
                conv2: id("conv2"),
                conv3: id("conv3"),
                bn1: BnIds::new(owner, "bn1"),
                bn2: BnIds::new(owner, "bn2"),
                bn3: BnIds::new(owner, "bn3"),
            }),
            BlockSpec::Vit { d, heads, dff } => Block::Vit(VitBlock {
                d,
                heads,
                dff,
                ln1: LnIds::new(owner, "ln1"),
                q: LinearIds::new(owner, "q"),
                k: LinearIds::new(owner, "k"),
                v: LinearIds::new(owner, "v"),
                o: LinearIds::new(owner, "o"),
                ln2: LnIds::new(owner, "ln2"),
                mlp1: LinearIds::new(owner, "mlp1"),
                mlp2: LinearIds::new(owner, "mlp2"),
            }),
        }
    }

    pub fn spec(&self) -> BlockSpec {
        match self {
            Block::Basic(p) => BlockSpec::Basic { c: p.c, q: p.q },
            Block::Bottleneck(p) => BlockSpec::Bottleneck { c: p.c, b: p.b, q: p.q },
            Block::Vit(p) => BlockSpec::Vit {
                d: p.d,
                heads: p.heads,
                dff: p.dff,
            },
        }
    }

    /// Kaiming-uniform convs/linears, zero biases, unit norms.
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        match self {
            Block::Basic(p) => {
                let (c, q) = (p.c, p.q);
                store.insert(p.conv1.clone(), kaiming_uniform(&[c, c, q, q], c * q * q, rng), ParamKind::Weight);
                store.insert(p.conv2.clone(), kaiming_uniform(&[c, c, q, q], c * q * q, rng), ParamKind::Weight);
                p.bn1.init(store, c);
                p.bn2.init(store, c);
            }
            Block::Bottleneck(p) => {
                let (c, b, q) = (p.c, p.b, p.q);
                store.insert(p.conv1.clone(), kaiming_uniform(&[b, c, 1, 1], c, rng), ParamKind::Weight);
                store.insert(p.conv2.clone(), kaiming_uniform(&[b, b, q, q], b * q * q, rng), ParamKind::Weight);
                store.insert(p.conv3.clone(), kaiming_uniform(&[c, b, 1, 1], b, rng), ParamKind::Weight);
                p.bn1.init(store, b);
                p.bn2.init(store, b);
                p.bn3.init(store, c);
            }
            Block::Vit(p) => {
                let d = p.d;
                p.ln1.init(store, d);
                for lin in [&p.q, &p.k, &p.v, &p.o] {
                    lin.init(store, d, d, rng);
                }
                p.ln2.init(store, d);
                p.mlp1.init(store, p.dff, d, rng);
                p.mlp2.init(store, d, p.dff, rng);
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        match self {
            Block::Basic(p) => {
                check_channels(tape, x, p.c, "basic_block_forward")?;
                let pad = p.q / 2;
                let w1 = tape.param(store, &p.conv1)?;
                let h = tape.conv2d(x, w1, 1, pad)?;
                let h = p.bn1.apply(tape, store, h, mode)?;
                let h = tape.relu(h);
                let w2 = tape.param(store, &p.conv2)?;
                let h = tape.conv2d(h, w2, 1, pad)?;
                let u = p.bn2.apply(tape, store, h, mode)?;
                let s = tape.add(x, u)?;
                Ok(tape.relu(s))
            }
            Block::Bottleneck(p) => {
                check_channels(tape, x, p.c, "bottleneck_forward")?;
                let w1 = tape.param(store, &p.conv1)?;
                let h = tape.conv2d(x, w1, 1, 0)?;
                let h = p.bn1.apply(tape, store, h, mode)?;
                let h = tape.relu(h);
                let w2 = tape.param(store, &p.conv2)?;
                let h = tape.conv2d(h, w2, 1, p.q / 2)?;
                let h = p.bn2.apply(tape, store, h, mode)?;
                let h = tape.relu(h);
                let w3 = tape.param(store, &p.conv3)?;
                let h = tape.conv2d(h, w3, 1, 0)?;
                let u = p.bn3.apply(tape, store, h, mode)?;
                let s = tape.add(x, u)?;
                Ok(tape.relu(s))
            }
            Block::Vit(p) => {
                let xs = tape.shape(x);
                if xs.len() != 3 || xs[2] != p.d {
                    return Err(ReplError::shape(
                        "vit_block_forward",
                        "model width",
                        format!("expected [B,T,{}], got {xs:?}", p.d),
                    ));
                }
                let n = p.ln1.apply(tape, store, x)?;
                let (wq, wk, wv, wo) = (
                    tape.param(store, &p.q.w)?,
                    tape.param(store, &p.k.w)?,
                    tape.param(store, &p.v.w)?,
                    tape.param(store, &p.o.w)?,
                );
                let (bq, bk, bv, bo) = (
                    tape.param(store, &p.q.b)?,
                    tape.param(store, &p.k.b)?,
                    tape.param(store, &p.v.b)?,
                    tape.param(store, &p.o.b)?,
                );
                let a = tape.msa(n, wq, wk, wv, wo, bq, bk, bv, bo, p.heads)?;
                let y = tape.add(x, a)?;
                let n = p.ln2.apply(tape, store, y)?;
                let h = p.mlp1.apply(tape, store, n)?;
                let h = tape.gelu(h);
                let m = p.mlp2.apply(tape, store, h)?;
                tape.add(y, m)
            }
        }
    }

    /// Every registry entry the block owns, buffers included.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        match self {
            Block::Basic(p) => {
                v.extend([p.conv1.clone(), p.conv2.clone()]);
                for bn in [&p.bn1, &p.bn2] {
                    v.extend(bn.all().into_iter().cloned());
                }
            }
            Block::Bottleneck(p) => {
                v.extend([p.conv1.clone(), p.conv2.clone(), p.conv3.clone()]);
                for bn in [&p.bn1, &p.bn2, &p.bn3] {
                    v.extend(bn.all().into_iter().cloned());
                }
            }
            Block::Vit(p) => {
                for ln in [&p.ln1, &p.ln2] {
                    v.extend([ln.gamma.clone(), ln.beta.clone()]);
                }
                for lin in [&p.q, &p.k, &p.v, &p.o, &p.mlp1, &p.mlp2] {
                    v.extend([lin.w.clone(), lin.b.clone()]);
                }
            }
        }
        v
    }
}

/// Builds a block named `owner` and initializes it from `(seed, owner)`.
pub fn init_block(spec: BlockSpec, owner: &str, seed: u64) -> Result<(Block, ParamStore)> {
    spec.validate()?;
    let block = Block::new(spec, owner);
    let mut store = ParamStore::new();
    block.init(&mut store, &mut unit_rng(seed, owner));
    Ok((block, store))
}

fn check_channels(tape: &Tape, x: Var, c: usize, op: &'static str) -> Result<()> {
    let xs = tape.shape(x);
    if xs.len() != 4 || xs[1] != c {
        return Err(ReplError::shape(op, "channels", format!("expected [B,{c},H,W], got {xs:?}")));
    }
    Ok(())
}

/// Conv + BN + ReLU; used for the stem (stride 1) and stage transitions
/// (stride 2, width change). Never removed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvUnit {
    pub cin: usize,
    pub cout: usize,
    pub q: usize,
    pub stride: usize,
    pub conv: ParamId,
    pub bn: BnIds,
}

impl ConvUnit {
    pub fn new(owner: &str, cin: usize, cout: usize, q: usize, stride: usize) -> Self {
        ConvUnit {
            cin,
            cout,
            q,
            stride,
            conv: ParamId::new(owner, "conv"),
            bn: BnIds::new(owner, "bn"),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let (ci, co, q) = (self.cin, self.cout, self.q);
        store.insert(self.conv.clone(), kaiming_uniform(&[co, ci, q, q], ci * q * q, rng), ParamKind::Weight);
        self.bn.init(store, co);
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let w = tape.param(store, &self.conv)?;
        let h = tape.conv2d(x, w, self.stride, self.q / 2)?;
        let h = self.bn.apply(tape, store, h, mode)?;
        Ok(tape.relu(h))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.conv.clone()];
        v.extend(self.bn.all().into_iter().cloned());
        v
    }
}

/// Non-overlapping patches, linear projection to width `d`, plus a
/// learned positional table `[T, d]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchEmbed {
    pub cin: usize,
    pub patch: usize,
    pub tokens: usize,
    pub d: usize,
    pub proj: LinearIds,
    pub pos: ParamId,
}

impl PatchEmbed {
    pub fn new(owner: &str, cin: usize, patch: usize, tokens: usize, d: usize) -> Self {
        PatchEmbed {
            cin,
            patch,
            tokens,
            d,
            proj: LinearIds::new(owner, "proj"),
            pos: ParamId::new(owner, "pos"),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.proj.init(store, self.d, self.cin * self.patch * self.patch, rng);
        store.insert(self.pos.clone(), Tensor::randn(&[self.tokens, self.d], 0.02, rng), ParamKind::Weight);
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let p = tape.patchify(x, self.patch)?;
        let h = self.proj.apply(tape, store, p)?;
        let pos = tape.param(store, &self.pos)?;
        tape.add_trailing(h, pos)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.proj.w.clone(), self.proj.b.clone(), self.pos.clone()]
    }
}

/// Pooling (global average over space or mean over tokens) + linear.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Head {
    pub din: usize,
    pub classes: usize,
    pub fc: LinearIds,
}

impl Head {
    pub fn new(owner: &str, din: usize, classes: usize) -> Self {
        Head {
            din,
            classes,
            fc: LinearIds::new(owner, "fc"),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.fc.init(store, self.classes, self.din, rng);
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let pooled = match tape.shape(x).len() {
            4 => tape.global_avg_pool(x)?,
            3 => tape.mean_tokens(x)?,
            _ => return Err(ReplError::shape("head", "rank", format!("{:?}", tape.shape(x)))),
        };
        self.fc.apply(tape, store, pooled)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.fc.w.clone(), self.fc.b.clone()]
    }
}

#[cfg(test)]
mod tests;
