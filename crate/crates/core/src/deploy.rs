//! Static inference graphs.
//!
//! [`export_deploy`] runs every computing layer's synthesis one final time,
//! folds each eval-mode batch norm into the convolution in front of it and
//! the headwise `d^{-1/2}` factor into the synthesized projection, and
//! emits a flat list of frozen ops. LayerNorms stay as ops since their
//! statistics depend on the data. A [`DeployModel`] holds no ids,
//! coefficients or tape and cannot be exported again.

use serde::{Deserialize, Serialize};

use crate::autodiff::Mode;
use crate::blocks::{Block, BnIds, ConvUnit, LinearIds, LnIds, EPS_BN, EPS_LN};
use crate::builder::{Network, Unit};
use crate::error::{ReplError, Result};
use crate::kernels::{self, ConvGeom, Scalar};
use crate::params::ParamStore;
use crate::replacement::{ComputingLayer, Synthesized, VitSynth};
use crate::tensor::{ParamId, Tensor};

/// Dense array with element type `T`. Only the shape is serialized; the
/// checkpoint writer stores values in its binary payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Array<T> {
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<T>,
}

impl<T: Scalar> Array<T> {
    fn from_tensor(t: &Tensor) -> Self {
        Array {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| T::from_f64(v)).collect(),
        }
    }

    fn cast<U: Scalar>(&self) -> Array<U> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(Scalar::to_f64(*v))).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", bound = "")]
pub enum DeployOp<T> {
    /// Convolution with folded bias, optionally followed by ReLU.
    Conv {
        w: Array<T>,
        b: Array<T>,
        stride: usize,
        pad: usize,
        relu: bool,
    },
    Linear {
        w: Array<T>,
        b: Array<T>,
    },
    LayerNorm {
        gamma: Array<T>,
        beta: Array<T>,
    },
    /// Multi-head self-attention with its four projections.
    Msa {
        heads: usize,
        q: (Array<T>, Array<T>),
        k: (Array<T>, Array<T>),
        v: (Array<T>, Array<T>),
        o: (Array<T>, Array<T>),
    },
    Relu,
    Gelu,
    /// `y = x + body(x)`, then ReLU if `relu`.
    Residual {
        body: Vec<DeployNode<T>>,
        relu: bool,
    },
    Patchify {
        patch: usize,
    },
    /// Adds a `[T, d]` table to every sample.
    AddPos {
        pos: Array<T>,
    },
    /// Spatial mean for images, token mean for sequences.
    Pool,
}

/// A static op and the dynamic entries it was folded from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct DeployNode<T> {
    pub op: DeployOp<T>,
    pub source: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct DeployModel<T> {
    pub input: [usize; 3],
    pub classes: usize,
    pub ops: Vec<DeployNode<T>>,
}

/// `W' = s·Ŵ` per output channel and `b' = s·(b̂ − μ) + β` with
/// `s = γ / sqrt(σ² + ε)`.
pub fn fold_bn_conv(
    w: &Tensor,
    b: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f64,
) -> Result<(Tensor, Tensor)> {
    let co = w.shape()[0];
    for (name, t) in [("bias", b), ("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)] {
        if t.shape() != [co] {
            return Err(ReplError::shape("fold_bn_conv", "channels", format!("{name} {:?} vs {co}", t.shape())));
        }
    }
    if let Some(v) = var.data().iter().find(|v| **v < 0.0 || v.is_nan()) {
        return Err(ReplError::invalid("fold_bn_conv", format!("negative running variance {v}")));
    }
    let per = w.len() / co;
    let mut wd = w.clone();
    let mut bd = Tensor::zeros(&[co]);
    for c in 0..co {
        let s = gamma.data()[c] / (var.data()[c] + eps).sqrt();
        for v in &mut wd.data_mut()[c * per..(c + 1) * per] {
            *v *= s;
        }
        bd.data_mut()[c] = s * (b.data()[c] - mean.data()[c]) + beta.data()[c];
    }
    Ok((wd, bd))
}

/// Elementwise `c·Ŵ`, `c·b̂`.
pub fn fold_linear(w: &Tensor, b: &Tensor, c_scale: f64) -> Result<(Tensor, Tensor)> {
    if c_scale <= 0.0 || !c_scale.is_finite() {
        return Err(ReplError::invalid("fold_linear", format!("scale must be positive, got {c_scale}")));
    }
    Ok((w.map(|v| c_scale * v), b.map(|v| c_scale * v)))
}

fn node<T>(op: DeployOp<T>, source: Vec<String>) -> DeployNode<T> {
    DeployNode { op, source }
}

fn ids(v: &[&ParamId]) -> Vec<String> {
    v.iter().map(|i| i.to_string()).collect()
}

fn bn_ids(bn: &BnIds) -> Vec<&ParamId> {
    bn.all().to_vec()
}

struct Exporter<'a> {
    store: &'a ParamStore,
}

impl Exporter<'_> {
    fn get(&self, id: &ParamId) -> Result<&Tensor> {
        self.store.get(id)
    }

    fn conv_bn(&self, w: &Tensor, bn: &BnIds, stride: usize, relu: bool, src: Vec<String>) -> Result<DeployNode<f64>> {
        let co = w.shape()[0];
        let (wd, bd) = fold_bn_conv(
            w,
            &Tensor::zeros(&[co]),
            self.get(&bn.gamma)?,
            self.get(&bn.beta)?,
            self.get(&bn.mean)?,
            self.get(&bn.var)?,
            EPS_BN,
        )?;
        let pad = w.shape()[2] / 2;
        Ok(node(
            DeployOp::Conv {
                w: Array::from_tensor(&wd),
                b: Array::from_tensor(&bd),
                stride,
                pad,
                relu,
            },
            src,
        ))
    }

    fn plain_conv(&self, w: &Tensor, relu: bool, src: Vec<String>) -> DeployNode<f64> {
        node(
            DeployOp::Conv {
                w: Array::from_tensor(w),
                b: Array::from_tensor(&Tensor::zeros(&[w.shape()[0]])),
                stride: 1,
                pad: w.shape()[2] / 2,
                relu,
            },
            src,
        )
    }

    fn conv_unit(&self, c: &ConvUnit) -> Result<DeployNode<f64>> {
        let mut src = vec![&c.conv];
        src.extend(bn_ids(&c.bn));
        self.conv_bn(self.get(&c.conv)?, &c.bn, c.stride, true, ids(&src))
    }

    fn linear(&self, l: &LinearIds) -> Result<DeployNode<f64>> {
        Ok(node(
            DeployOp::Linear {
                w: Array::from_tensor(self.get(&l.w)?),
                b: Array::from_tensor(self.get(&l.b)?),
            },
            ids(&[&l.w, &l.b]),
        ))
    }

    fn layer_norm(&self, ln: &LnIds) -> Result<DeployNode<f64>> {
        Ok(node(
            DeployOp::LayerNorm {
                gamma: Array::from_tensor(self.get(&ln.gamma)?),
                beta: Array::from_tensor(self.get(&ln.beta)?),
            },
            ids(&[&ln.gamma, &ln.beta]),
        ))
    }

    fn pair(&self, l: &LinearIds) -> Result<(Array<f64>, Array<f64>)> {
        Ok((Array::from_tensor(self.get(&l.w)?), Array::from_tensor(self.get(&l.b)?)))
    }

    fn block(&self, owner: &str, b: &Block) -> Result<Vec<DeployNode<f64>>> {
        let res = |body, relu| node(DeployOp::Residual { body, relu }, vec![owner.to_string()]);
        Ok(match b {
            Block::Basic(p) => {
                let c1 = self.conv_bn(self.get(&p.conv1)?, &p.bn1, 1, true, ids(&[&[&p.conv1][..], &bn_ids(&p.bn1)].concat()))?;
                let c2 = self.conv_bn(self.get(&p.conv2)?, &p.bn2, 1, false, ids(&[&[&p.conv2][..], &bn_ids(&p.bn2)].concat()))?;
                vec![res(vec![c1, c2], true)]
            }
            Block::Bottleneck(p) => {
                let mut body = Vec::new();
                for (i, (w, bn)) in [(&p.conv1, &p.bn1), (&p.conv2, &p.bn2), (&p.conv3, &p.bn3)].into_iter().enumerate() {
                    body.push(self.conv_bn(self.get(w)?, bn, 1, i < 2, ids(&[&[w][..], &bn_ids(bn)].concat()))?);
                }
                vec![res(body, true)]
            }
            Block::Vit(p) => {
                let msa = node(
                    DeployOp::Msa {
                        heads: p.heads,
                        q: self.pair(&p.q)?,
                        k: self.pair(&p.k)?,
                        v: self.pair(&p.v)?,
                        o: self.pair(&p.o)?,
                    },
                    ids(&[&p.q.w, &p.q.b, &p.k.w, &p.k.b, &p.v.w, &p.v.b, &p.o.w, &p.o.b]),
                );
                let attn = res(vec![self.layer_norm(&p.ln1)?, msa], false);
                let mlp = res(
                    vec![
                        self.layer_norm(&p.ln2)?,
                        self.linear(&p.mlp1)?,
                        node(DeployOp::Gelu, vec![owner.to_string()]),
                        self.linear(&p.mlp2)?,
                    ],
                    false,
                );
                vec![attn, mlp]
            }
        })
    }

    fn computing(&self, owner: &str, layer: &ComputingLayer) -> Result<Vec<DeployNode<f64>>> {
        let mut synth_src: Vec<String> = layer.anchors().iter().map(|i| i.to_string()).collect();
        synth_src.extend(layer.param_ids().iter().map(|i| i.to_string()));
        let res = |body, relu| node(DeployOp::Residual { body, relu }, vec![owner.to_string()]);
        Ok(match (layer, layer.synthesize(self.store)?) {
            (ComputingLayer::Basic(l), Synthesized::Basic { w }) => {
                let c = self.conv_bn(&w, &l.bn, 1, false, synth_src)?;
                vec![res(vec![c], true)]
            }
            (ComputingLayer::Bottleneck(l), Synthesized::Bottleneck { red, mid, exp }) => {
                let body = vec![
                    self.plain_conv(&red, true, ids(&[&l.red])),
                    self.plain_conv(&mid, true, synth_src.clone()),
                    self.conv_bn(&exp, &l.bn, 1, false, ids(&[&[&l.exp][..], &bn_ids(&l.bn)].concat()))?,
                ];
                vec![res(body, true)]
            }
            (ComputingLayer::Vit(l), Synthesized::Vit { proj, mlp }) => {
                let mut out = Vec::new();
                if let Some((w, b)) = proj {
                    let body = match l.synth {
                        VitSynth::Scalar => vec![node(
                            DeployOp::Linear {
                                w: Array::from_tensor(&w),
                                b: Array::from_tensor(&b),
                            },
                            synth_src.clone(),
                        )],
                        VitSynth::Headwise => {
                            // the scale multiplies LN(X)·Ŵᵀ only; the bias stays as synthesized
                            let (wd, _) = fold_linear(&w, &Tensor::zeros(b.shape()), (l.d as f64).powf(-0.5))?;
                            vec![
                                self.layer_norm(&l.ln1_prev)?,
                                node(
                                    DeployOp::Linear {
                                        w: Array::from_tensor(&wd),
                                        b: Array::from_tensor(&b),
                                    },
                                    synth_src.clone(),
                                ),
                            ]
                        }
                    };
                    out.push(res(body, false));
                }
                if let Some([w1, b1, w2, b2]) = mlp {
                    let lin = |w: &Tensor, b: &Tensor| {
                        node(
                            DeployOp::Linear {
                                w: Array::from_tensor(w),
                                b: Array::from_tensor(b),
                            },
                            synth_src.clone(),
                        )
                    };
                    let body = vec![
                        self.layer_norm(&l.ln2_prev)?,
                        lin(&w1, &b1),
                        node(DeployOp::Gelu, vec![owner.to_string()]),
                        lin(&w2, &b2),
                    ];
                    out.push(res(body, false));
                }
                out
            }
            _ => unreachable!("synthesis matches layer kind"),
        })
    }
}

/// Materializes `net` as a static graph. Batch norms are folded with their
/// running statistics, so only eval-mode export is defined.
pub fn export_deploy(net: &Network, mode: Mode) -> Result<DeployModel<f64>> {
    if mode != Mode::Eval {
        return Err(ReplError::invalid("export_deploy", "deploy export needs an eval-mode network"));
    }
    let ex = Exporter { store: &net.store };
    let mut ops = Vec::new();
    for unit in &net.units {
        let owner = unit.owner();
        match unit {
            Unit::Stem(c) | Unit::Transition { conv: c, .. } => ops.push(ex.conv_unit(c)?),
            Unit::Embed(e) => {
                ops.push(node(DeployOp::Patchify { patch: e.patch }, vec![owner.clone()]));
                ops.push(ex.linear(&e.proj)?);
                ops.push(node(
                    DeployOp::AddPos {
                        pos: Array::from_tensor(ex.get(&e.pos)?),
                    },
                    ids(&[&e.pos]),
                ));
            }
            Unit::Block { block, .. } => ops.extend(ex.block(&owner, block)?),
            Unit::Computing { layer, .. } => ops.extend(ex.computing(&owner, layer)?),
            Unit::Head(h) => {
                ops.push(node(DeployOp::Pool, vec![owner.clone()]));
                ops.push(ex.linear(&h.fc)?);
            }
        }
    }
    Ok(DeployModel {
        input: net.spec.input,
        classes: net.spec.classes,
        ops,
    })
}

fn count_nodes<T>(nodes: &[DeployNode<T>]) -> usize {
    nodes
        .iter()
        .map(|n| match &n.op {
            DeployOp::Residual { body, .. } => 1 + count_nodes(body),
            _ => 1,
        })
        .sum()
}

fn all_sourced<T>(nodes: &[DeployNode<T>]) -> bool {
    nodes.iter().all(|n| {
        !n.source.is_empty()
            && match &n.op {
                DeployOp::Residual { body, .. } => all_sourced(body),
                _ => true,
            }
    })
}

fn visit_arrays<T>(nodes: &mut [DeployNode<T>], f: &mut dyn FnMut(&mut Array<T>)) {
    for n in nodes {
        match &mut n.op {
            DeployOp::Conv { w, b, .. } | DeployOp::Linear { w, b } => {
                f(w);
                f(b);
            }
            DeployOp::LayerNorm { gamma, beta } => {
                f(gamma);
                f(beta);
            }
            DeployOp::Msa { q, k, v, o, .. } => {
                for (w, b) in [q, k, v, o] {
                    f(w);
                    f(b);
                }
            }
            DeployOp::Residual { body, .. } => visit_arrays(body, f),
            DeployOp::AddPos { pos } => f(pos),
            DeployOp::Relu | DeployOp::Gelu | DeployOp::Patchify { .. } | DeployOp::Pool => {}
        }
    }
}

fn cast_nodes<T: Scalar, U: Scalar>(nodes: &[DeployNode<T>]) -> Vec<DeployNode<U>> {
    let pair = |p: &(Array<T>, Array<T>)| (p.0.cast(), p.1.cast());
    nodes
        .iter()
        .map(|n| {
            let op = match &n.op {
                DeployOp::Conv { w, b, stride, pad, relu } => DeployOp::Conv {
                    w: w.cast(),
                    b: b.cast(),
                    stride: *stride,
                    pad: *pad,
                    relu: *relu,
                },
                DeployOp::Linear { w, b } => DeployOp::Linear { w: w.cast(), b: b.cast() },
                DeployOp::LayerNorm { gamma, beta } => DeployOp::LayerNorm {
                    gamma: gamma.cast(),
                    beta: beta.cast(),
                },
                DeployOp::Msa { heads, q, k, v, o } => DeployOp::Msa {
                    heads: *heads,
                    q: pair(q),
                    k: pair(k),
                    v: pair(v),
                    o: pair(o),
                },
                DeployOp::Relu => DeployOp::Relu,
                DeployOp::Gelu => DeployOp::Gelu,
                DeployOp::Residual { body, relu } => DeployOp::Residual {
                    body: cast_nodes(body),
                    relu: *relu,
                },
                DeployOp::Patchify { patch } => DeployOp::Patchify { patch: *patch },
                DeployOp::AddPos { pos } => DeployOp::AddPos { pos: pos.cast() },
                DeployOp::Pool => DeployOp::Pool,
            };
            DeployNode {
                op,
                source: n.source.clone(),
            }
        })
        .collect()
}

struct Act<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn shape_err(op: &'static str, detail: String) -> ReplError {
    ReplError::shape(op, "activation", detail)
}

fn run_linear<T: Scalar>(x: &Act<T>, w: &Array<T>, b: &Array<T>) -> Result<Act<T>> {
    let (dout, din) = (w.shape[0], w.shape[1]);
    if x.shape.last() != Some(&din) {
        return Err(shape_err("deploy_linear", format!("{:?} vs weight {:?}", x.shape, w.shape)));
    }
    let rows = x.data.len() / din;
    let mut shape = x.shape.clone();
    *shape.last_mut().expect("non-empty") = dout;
    Ok(Act {
        shape,
        data: kernels::linear_forward(rows, din, dout, &x.data, &w.data, Some(&b.data)),
    })
}

fn run_nodes<T: Scalar>(nodes: &[DeployNode<T>], mut x: Act<T>) -> Result<Act<T>> {
    for n in nodes {
        x = match &n.op {
            DeployOp::Conv { w, b, stride, pad, relu } => {
                if x.shape.len() != 4 || x.shape[1] != w.shape[1] {
                    return Err(shape_err("deploy_conv", format!("{:?} vs kernel {:?}", x.shape, w.shape)));
                }
                let g = ConvGeom {
                    batch: x.shape[0],
                    cin: x.shape[1],
                    h: x.shape[2],
                    w: x.shape[3],
                    cout: w.shape[0],
                    kh: w.shape[2],
                    kw: w.shape[3],
                    stride: *stride,
                    pad: *pad,
                };
                let mut y = kernels::conv2d_forward(&g, &x.data, &w.data, Some(&b.data));
                if *relu {
                    y.iter_mut().for_each(|v| *v = kernels::relu(*v));
                }
                Act {
                    shape: vec![g.batch, g.cout, g.out_h(), g.out_w()],
                    data: y,
                }
            }
            DeployOp::Linear { w, b } => run_linear(&x, w, b)?,
            DeployOp::LayerNorm { gamma, beta } => {
                let d = gamma.data.len();
                let rows = x.data.len() / d;
                let (y, _, _) = kernels::layer_norm_forward(rows, d, &x.data, &gamma.data, &beta.data, EPS_LN);
                Act { shape: x.shape, data: y }
            }
            DeployOp::Msa { heads, q, k, v, o } => {
                if x.shape.len() != 3 {
                    return Err(shape_err("deploy_msa", format!("{:?}", x.shape)));
                }
                let (b, t, d) = (x.shape[0], x.shape[1], x.shape[2]);
                let qa = run_linear(&x, &q.0, &q.1)?;
                let ka = run_linear(&x, &k.0, &k.1)?;
                let va = run_linear(&x, &v.0, &v.1)?;
                let (a, _) = kernels::attention_forward(b, t, d, *heads, &qa.data, &ka.data, &va.data);
                run_linear(&Act { shape: x.shape.clone(), data: a }, &o.0, &o.1)?
            }
            DeployOp::Relu => Act {
                data: x.data.iter().map(|&v| kernels::relu(v)).collect(),
                shape: x.shape,
            },
            DeployOp::Gelu => Act {
                data: x.data.iter().map(|&v| kernels::gelu(v)).collect(),
                shape: x.shape,
            },
            DeployOp::Residual { body, relu } => {
                let shape = x.shape.clone();
                let skip = x.data.clone();
                let y = run_nodes(body, x)?;
                if y.shape != shape {
                    return Err(shape_err("deploy_residual", format!("{:?} vs {shape:?}", y.shape)));
                }
                let data = skip
                    .iter()
                    .zip(&y.data)
                    .map(|(&a, &b)| {
                        let s = a + b;
                        if *relu {
                            kernels::relu(s)
                        } else {
                            s
                        }
                    })
                    .collect();
                Act { shape, data }
            }
            DeployOp::Patchify { patch } => {
                let s = &x.shape;
                if s.len() != 4 || s[2] % patch != 0 || s[3] % patch != 0 {
                    return Err(shape_err("deploy_patchify", format!("{s:?}")));
                }
                let t = (s[2] / patch) * (s[3] / patch);
                Act {
                    data: kernels::patchify(s[0], s[1], s[2], s[3], *patch, &x.data),
                    shape: vec![s[0], t, s[1] * patch * patch],
                }
            }
            DeployOp::AddPos { pos } => {
                let per = pos.data.len();
                let mut data = x.data;
                for chunk in data.chunks_mut(per) {
                    for (v, &p) in chunk.iter_mut().zip(&pos.data) {
                        *v = *v + p;
                    }
                }
                Act { shape: x.shape, data }
            }
            DeployOp::Pool => match x.shape.len() {
                4 => {
                    let s = &x.shape;
                    Act {
                        data: kernels::mean_mid(s[0] * s[1], s[2] * s[3], 1, &x.data),
                        shape: vec![s[0], s[1]],
                    }
                }
                3 => {
                    let s = &x.shape;
                    Act {
                        data: kernels::mean_mid(s[0], s[1], s[2], &x.data),
                        shape: vec![s[0], s[2]],
                    }
                }
                _ => return Err(shape_err("deploy_pool", format!("{:?}", x.shape))),
            },
        };
    }
    Ok(x)
}

impl<T: Scalar> DeployModel<T> {
    /// Logits `[B, classes]` for `x` of shape `[B, C, H, W]`, row-major.
    pub fn forward(&self, batch: usize, x: &[T]) -> Result<Vec<T>> {
        let per: usize = self.input.iter().product();
        if x.len() != batch * per {
            return Err(ReplError::shape(
                "deploy_forward",
                "input",
                format!("{} values for {batch} samples of {:?}", x.len(), self.input),
            ));
        }
        let shape = vec![batch, self.input[0], self.input[1], self.input[2]];
        Ok(run_nodes(&self.ops, Act { shape, data: x.to_vec() })?.data)
    }

    /// Total op count, residual containers included.
    pub fn op_count(&self) -> usize {
        count_nodes(&self.ops)
    }

    /// Whether every op (nested ones too) names its dynamic source.
    pub fn provenance_complete(&self) -> bool {
        all_sourced(&self.ops)
    }

    pub fn cast<U: Scalar>(&self) -> DeployModel<U> {
        DeployModel {
            input: self.input,
            classes: self.classes,
            ops: cast_nodes(&self.ops),
        }
    }

    /// Visits every weight array in a fixed order.
    pub fn visit_arrays_mut(&mut self, f: &mut dyn FnMut(&mut Array<T>)) {
        visit_arrays(&mut self.ops, f);
    }

    /// Provenance strings in pre-order.
    pub fn provenance(&self) -> Vec<Vec<String>> {
        fn walk<T>(nodes: &[DeployNode<T>], out: &mut Vec<Vec<String>>) {
            for n in nodes {
                out.push(n.source.clone());
                if let DeployOp::Residual { body, .. } = &n.op {
                    walk(body, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.ops, &mut out);
        out
    }
}

impl DeployModel<f64> {
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let b = x.shape()[0];
        let y = self.forward(b, x.data())?;
        Ok(Tensor::from_vec(&[b, self.classes], y))
    }
}

/// Max over inputs and logits of `|dynamic − deploy|` (both eval mode).
pub fn equivalence_check<T: Scalar>(net: &Network, deploy: &DeployModel<T>, inputs: &Tensor) -> Result<f64> {
    if inputs.shape().len() != 4 || inputs.shape()[1..] != deploy.input {
        return Err(ReplError::shape(
            "equivalence_check",
            "input",
            format!("{:?} vs {:?}", inputs.shape(), deploy.input),
        ));
    }
    let dynamic = net.logits(inputs, Mode::Eval)?;
    let xs: Vec<T> = inputs.data().iter().map(|&v| T::from_f64(v)).collect();
    let out = deploy.forward(inputs.shape()[0], &xs)?;
    if out.len() != dynamic.len() {
        return Err(ReplError::shape("equivalence_check", "logits", format!("{} vs {}", out.len(), dynamic.len())));
    }
    Ok(dynamic
        .data()
        .iter()
        .zip(&out)
        .map(|(a, b)| (a - Scalar::to_f64(*b)).abs())
        .fold(0.0, f64::max))
}

/// Op count of the dynamic eval-mode graph for a batch of one.
pub fn dynamic_op_count(net: &Network) -> Result<usize> {
    let [c, h, w] = net.spec.input;
    let mut tape = crate::autodiff::Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, c, h, w]));
    net.forward(&mut tape, x, Mode::Eval)?;
    Ok(tape.op_count())
}

#[cfg(test)]
mod tests;
