use serde::{Deserialize, Serialize};

use super::{Tape, Var};
use crate::error::{ReplError, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{ParamId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// How a coefficient vector maps onto the elements of the tensor it scales.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grouping {
    /// One coefficient for every element.
    Scalar,
    /// One coefficient per index of the leading axis (output channel / row).
    Leading,
    /// `[out, in]` matrix, one coefficient per contiguous block of
    /// `in / heads` columns.
    ColumnHeads { heads: usize },
}

impl Grouping {
    pub fn groups(self, shape: &[usize]) -> usize {
        match self {
            Grouping::Scalar => 1,
            Grouping::Leading => shape[0],
            Grouping::ColumnHeads { heads } => heads,
        }
    }

    /// Group index of every element in row-major order.
    pub fn index_map(self, shape: &[usize]) -> Vec<usize> {
        let n: usize = shape.iter().product();
        match self {
            Grouping::Scalar => vec![0; n],
            Grouping::Leading => {
                let row = n / shape[0].max(1);
                (0..n).map(|i| i / row).collect()
            }
            Grouping::ColumnHeads { heads } => {
                let cols = shape[1];
                let per = cols / heads;
                (0..n).map(|i| (i % cols) / per).collect()
            }
        }
    }

    fn check(self, op: &'static str, shape: &[usize], coeffs: usize) -> Result<()> {
        if let Grouping::ColumnHeads { heads } = self {
            if shape.len() != 2 {
                return Err(ReplError::shape(op, "rank", format!("head grouping needs a matrix, got {shape:?}")));
            }
            if heads == 0 || shape[1] % heads != 0 {
                return Err(ReplError::shape(
                    op,
                    "columns",
                    format!("{} columns not divisible into {heads} heads", shape[1]),
                ));
            }
        }
        let g = self.groups(shape);
        if g != coeffs {
            return Err(ReplError::shape(
                op,
                "coefficients",
                format!("{coeffs} coefficients for {g} groups of {shape:?}"),
            ));
        }
        Ok(())
    }
}

/// Running statistics handed to a batch norm, with the registry ids to
/// update in train mode.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Tensor,
    pub var: Tensor,
    pub ids: Option<(ParamId, ParamId)>,
}

/// New running statistics computed by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct StatUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Tensor,
    pub var: Tensor,
}

pub(crate) enum Op {
    Leaf,
    StopGrad,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddTrailing(Var, Var),
    Sum(Var),
    Reshape(Var),
    Relu(Var),
    Gelu(Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    RowNormalize {
        x: Var,
        norms: Vec<f64>,
    },
    GroupScale {
        x: Var,
        s: Var,
        groups: Vec<usize>,
    },
    MeanMid {
        x: Var,
        outer: usize,
        mid: usize,
        inner: usize,
    },
    Patchify {
        x: Var,
        dims: [usize; 5],
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::StopGrad => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddTrailing(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sum(a)
            | Op::Reshape(a)
            | Op::Relu(a)
            | Op::Gelu(a) => vec![*a],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Linear { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } | Op::LayerNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::RowNormalize { x, .. } | Op::MeanMid { x, .. } | Op::Patchify { x, .. } => vec![*x],
            Op::GroupScale { x, s, .. } => vec![*x, *s],
        }
    }
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(ReplError::shape(
            op,
            "operand shape",
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    Ok(())
}

impl Tape {
    /// Identity on values; blocks all gradient flow into `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGrad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    /// `a + b` with `b` broadcast over the leading axes of `a`
    /// (`b.shape` must equal a suffix of `a.shape`).
    pub fn add_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(ReplError::shape(
                "add_trailing",
                "trailing dims",
                format!("{sa:?} + {sb:?}"),
            ));
        }
        let bv = self.value(b).data().to_vec();
        let mut v = self.value(a).clone();
        for chunk in v.data_mut().chunks_mut(bv.len()) {
            for (x, y) in chunk.iter_mut().zip(&bv) {
                *x += y;
            }
        }
        Ok(self.push(v, Op::AddTrailing(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::relu);
        self.push(v, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::gelu);
        self.push(v, Op::Gelu(a))
    }

    /// Bias-free 2-D convolution, `x: [B,Cin,H,W]`, `w: [Cout,Cin,q,q]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 {
            return Err(ReplError::shape("conv2d", "input rank", format!("expected [B,C,H,W], got {xs:?}")));
        }
        if ws.len() != 4 {
            return Err(ReplError::shape("conv2d", "kernel rank", format!("expected [Cout,Cin,q,q], got {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(ReplError::shape(
                "conv2d",
                "input channels",
                format!("input has {} channels, kernel expects {}", xs[1], ws[1]),
            ));
        }
        if stride == 0 {
            return Err(ReplError::invalid("conv2d", "stride must be positive"));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(ReplError::shape(
                "conv2d",
                "spatial extent",
                format!("kernel {}x{} larger than padded input {:?}", ws[2], ws[3], xs),
            ));
        }
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data(), None);
        let shape = [geom.batch, geom.cout, geom.out_h(), geom.out_w()];
        Ok(self.push(Tensor::from_vec(&shape, out), Op::Conv2d { x, w, geom }))
    }

    /// `x[..., din] · wᵀ + b` with `w: [dout, din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if ws.len() != 2 {
            return Err(ReplError::shape("linear", "weight rank", format!("{ws:?}")));
        }
        let (dout, din) = (ws[0], ws[1]);
        if xs.last() != Some(&din) {
            return Err(ReplError::shape(
                "linear",
                "input features",
                format!("input {xs:?} does not end in {din}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(ReplError::shape("linear", "bias", format!("{:?} vs [{dout}]", self.shape(b))));
            }
        }
        let rows = self.value(x).len() / din;
        let y = kernels::linear_forward(
            rows,
            din,
            dout,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        Ok(self.push(
            Tensor::from_vec(&shape, y),
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            },
        ))
    }

    /// Batch normalization over axis 1 of `[B, C, ...]`.
    ///
    /// Train mode normalizes by biased batch statistics and records the
    /// exponential-moving-average update of the running statistics (using
    /// the unbiased batch variance) on the tape.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &BnStats,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(ReplError::shape("batch_norm", "rank", format!("{xs:?}")));
        }
        let (b, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        for (name, v) in [("gamma", self.shape(gamma)), ("beta", self.shape(beta))] {
            if v != [c] {
                return Err(ReplError::shape("batch_norm", "channels", format!("{name} {v:?} vs {c} channels")));
            }
        }
        if stats.mean.shape() != [c] || stats.var.shape() != [c] {
            return Err(ReplError::shape("batch_norm", "channels", "running statistics"));
        }
        let n = b * spatial;
        let train = mode == Mode::Train;
        if train && n == 0 {
            return Err(ReplError::invalid("batch_norm", "empty batch in train mode"));
        }
        let xd = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let (mean, var): (Vec<f64>, Vec<f64>) = if train {
            (0..c)
                .map(|ch| {
                    let mut s = 0.0;
                    for bi in 0..b {
                        s += xd[(bi * c + ch) * spatial..(bi * c + ch + 1) * spatial].iter().sum::<f64>();
                    }
                    let m = s / n as f64;
                    let mut q = 0.0;
                    for bi in 0..b {
                        for &v in &xd[(bi * c + ch) * spatial..(bi * c + ch + 1) * spatial] {
                            q += (v - m) * (v - m);
                        }
                    }
                    (m, q / n as f64)
                })
                .unzip()
        } else {
            (stats.mean.data().to_vec(), stats.var.data().to_vec())
        };
        if var.iter().any(|&v| v < 0.0) {
            return Err(ReplError::invalid("batch_norm", "negative variance"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut y = vec![0.0; xd.len()];
        let mut xhat = vec![0.0; xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * spatial;
                for i in base..base + spatial {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    y[i] = g[ch] * h + bt[ch];
                }
            }
        }
        if train {
            if let Some((mid, vid)) = &stats.ids {
                let unbiased = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
                let new_mean = stats
                    .mean
                    .data()
                    .iter()
                    .zip(&mean)
                    .map(|(r, m)| (1.0 - momentum) * r + momentum * m)
                    .collect();
                let new_var = stats
                    .var
                    .data()
                    .iter()
                    .zip(&var)
                    .map(|(r, v)| (1.0 - momentum) * r + momentum * v * unbiased)
                    .collect();
                self.record_stat_update(StatUpdate {
                    mean_id: mid.clone(),
                    var_id: vid.clone(),
                    mean: Tensor::from_vec(&[c], new_mean),
                    var: Tensor::from_vec(&[c], new_var),
                });
            }
        }
        Ok(self.push(
            Tensor::from_vec(&xs, y),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        ))
    }

    /// Last-axis layer normalization.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| ReplError::shape("layer_norm", "rank", "scalar input"))?;
        for (name, v) in [("gamma", self.shape(gamma)), ("beta", self.shape(beta))] {
            if v != [d] {
                return Err(ReplError::shape("layer_norm", "features", format!("{name} {v:?} vs {d}")));
            }
        }
        let rows = self.value(x).len() / d;
        let (y, xhat, inv_std) = kernels::layer_norm_forward(
            rows,
            d,
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        Ok(self.push(
            Tensor::from_vec(&xs, y),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Softmax attention core on already-projected `q, k, v: [B,T,d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        if qs.len() != 3 {
            return Err(ReplError::shape("attention", "rank", format!("expected [B,T,d], got {qs:?}")));
        }
        if self.shape(k) != qs.as_slice() || self.shape(v) != qs.as_slice() {
            return Err(ReplError::shape("attention", "q/k/v shape", "q, k and v must agree"));
        }
        let (b, t, d) = (qs[0], qs[1], qs[2]);
        if heads == 0 || d % heads != 0 {
            return Err(ReplError::shape("attention", "heads", format!("d={d} not divisible by H={heads}")));
        }
        let (out, probs) = kernels::attention_forward(
            b,
            t,
            d,
            heads,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        Ok(self.push(Tensor::from_vec(&qs, out), Op::Attention { q, k, v, heads, probs }))
    }

    /// Mean cross-entropy of `logits: [B, C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(ReplError::shape(
                "cross_entropy",
                "batch",
                format!("logits {ls:?} vs {} labels", labels.len()),
            ));
        }
        let (b, c) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(ReplError::invalid("cross_entropy", format!("label {bad} outside [0, {c})")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &z[i * c..(i + 1) * c];
            let (arg, mx) = row
                .iter()
                .cloned()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
            // the max term is exactly 1; ln_1p keeps small tails accurate
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != arg)
                .map(|(_, v)| (v - mx).exp())
                .sum();
            let log_sum = rest.ln_1p();
            let lse = mx + log_sum;
            loss += (mx - row[label]) + log_sum;
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let loss = if b == 0 { 0.0 } else { loss / b as f64 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Divides each leading-axis slice by `sqrt(sum of squares + eps)`.
    pub fn row_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(ReplError::invalid("row_normalize", "eps must be positive"));
        }
        let xs = self.shape(x).to_vec();
        let rows = *xs.first().ok_or_else(|| ReplError::shape("row_normalize", "rank", "scalar"))?;
        let xv = self.value(x).data();
        let len = xv.len() / rows.max(1);
        let mut y = vec![0.0; xv.len()];
        let mut norms = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * len..(r + 1) * len];
            let n = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            norms[r] = n;
            for (o, &v) in y[r * len..(r + 1) * len].iter_mut().zip(row) {
                *o = v / n;
            }
        }
        Ok(self.push(Tensor::from_vec(&xs, y), Op::RowNormalize { x, norms }))
    }

    /// Multiplies every element of `x` by the coefficient of its group.
    pub fn group_scale(&mut self, x: Var, s: Var, grouping: Grouping) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        grouping.check("group_scale", &xs, self.value(s).len())?;
        let groups = grouping.index_map(&xs);
        let sv = self.value(s).data();
        let y: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(&groups)
            .map(|(v, &g)| v * sv[g])
            .collect();
        Ok(self.push(Tensor::from_vec(&xs, y), Op::GroupScale { x, s, groups }))
    }

    /// `[B, C, H, W] -> [B, C]` global average pool.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(ReplError::shape("global_avg_pool", "rank", format!("{xs:?}")));
        }
        let (outer, mid) = (xs[0] * xs[1], xs[2] * xs[3]);
        let y = kernels::mean_mid(outer, mid, 1, self.value(x).data());
        Ok(self.push(
            Tensor::from_vec(&[xs[0], xs[1]], y),
            Op::MeanMid {
                x,
                outer,
                mid,
                inner: 1,
            },
        ))
    }

    /// `[B, T, d] -> [B, d]` mean over tokens.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(ReplError::shape("mean_tokens", "rank", format!("{xs:?}")));
        }
        let y = kernels::mean_mid(xs[0], xs[1], xs[2], self.value(x).data());
        Ok(self.push(
            Tensor::from_vec(&[xs[0], xs[2]], y),
            Op::MeanMid {
                x,
                outer: xs[0],
                mid: xs[1],
                inner: xs[2],
            },
        ))
    }

    /// `[B, C, H, W] -> [B, (H/p)(W/p), C·p·p]`.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || patch == 0 || xs[2] % patch != 0 || xs[3] % patch != 0 {
            return Err(ReplError::shape(
                "patchify",
                "spatial extent",
                format!("{xs:?} not divisible into {patch}x{patch} patches"),
            ));
        }
        let dims = [xs[0], xs[1], xs[2], xs[3], patch];
        let y = kernels::patchify(xs[0], xs[1], xs[2], xs[3], patch, self.value(x).data());
        let t = (xs[2] / patch) * (xs[3] / patch);
        Ok(self.push(
            Tensor::from_vec(&[xs[0], t, xs[1] * patch * patch], y),
            Op::Patchify { x, dims },
        ))
    }

    /// Multi-head self-attention with input and output projections.
    #[allow(clippy::too_many_arguments)]
    pub fn msa(
        &mut self,
        x: Var,
        wq: Var,
        wk: Var,
        wv: Var,
        wo: Var,
        bq: Var,
        bk: Var,
        bv: Var,
        bo: Var,
        heads: usize,
    ) -> Result<Var> {
        let q = self.linear(x, wq, Some(bq))?;
        let k = self.linear(x, wk, Some(bk))?;
        let v = self.linear(x, wv, Some(bv))?;
        let a = self.attention(q, k, v, heads)?;
        self.linear(a, wo, Some(bo))
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], tape: &Tape, v: Var, g: impl FnOnce() -> Vec<f64>) {
    if !tape.nodes[v.0].requires_grad {
        return;
    }
    let g = g();
    match &mut grads[v.0] {
        Some(slot) => {
            for (s, x) in slot.iter_mut().zip(&g) {
                *s += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn backward_node(tape: &Tape, out: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| tape.nodes[v.0].value.data();
    match &tape.nodes[out.0].op {
        Op::Leaf | Op::StopGrad => {}
        Op::Add(a, b) => {
            acc(grads, tape, *a, || g.to_vec());
            acc(grads, tape, *b, || g.to_vec());
        }
        Op::Sub(a, b) => {
            acc(grads, tape, *a, || g.to_vec());
            acc(grads, tape, *b, || g.iter().map(|x| -x).collect());
        }
        Op::Mul(a, b) => {
            acc(grads, tape, *a, || g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
            acc(grads, tape, *b, || g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
        }
        Op::Scale(a, c) => acc(grads, tape, *a, || g.iter().map(|x| c * x).collect()),
        Op::AddScalar(a) | Op::Reshape(a) => acc(grads, tape, *a, || g.to_vec()),
        Op::AddTrailing(a, b) => {
            acc(grads, tape, *a, || g.to_vec());
            acc(grads, tape, *b, || {
                let n = val(*b).len();
                let mut gb = vec![0.0; n];
                for chunk in g.chunks(n) {
                    for (s, x) in gb.iter_mut().zip(chunk) {
                        *s += x;
                    }
                }
                gb
            });
        }
        Op::Sum(a) => acc(grads, tape, *a, || vec![g[0]; val(*a).len()]),
        Op::Relu(a) => acc(grads, tape, *a, || {
            g.iter()
                .zip(val(*a))
                .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                .collect()
        }),
        Op::Gelu(a) => acc(grads, tape, *a, || {
            g.iter().zip(val(*a)).map(|(x, &v)| x * kernels::gelu_grad(v)).collect()
        }),
        Op::Conv2d { x, w, geom } => {
            if tape.nodes[x.0].requires_grad || tape.nodes[w.0].requires_grad {
                let (gx, gw) = kernels::conv2d_backward(geom, val(*x), val(*w), g);
                acc(grads, tape, *x, || gx);
                acc(grads, tape, *w, || gw);
            }
        }
        Op::Linear {
            x,
            w,
            b,
            rows,
            din,
            dout,
        } => {
            let (gx, gw, gb) = kernels::linear_backward(*rows, *din, *dout, val(*x), val(*w), g);
            acc(grads, tape, *x, || gx);
            acc(grads, tape, *w, || gw);
            if let Some(b) = b {
                acc(grads, tape, *b, || gb);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let xs = tape.shape(*x);
            let (b, c) = (xs[0], xs[1]);
            let spatial: usize = xs[2..].iter().product();
            let gam = val(*gamma);
            let mut gg = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            let mut sum_gxh = vec![0.0; c];
            let mut sum_gxh_xh = vec![0.0; c];
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * spatial;
                    for i in base..base + spatial {
                        gg[ch] += g[i] * xhat[i];
                        gbeta[ch] += g[i];
                        let gxh = g[i] * gam[ch];
                        sum_gxh[ch] += gxh;
                        sum_gxh_xh[ch] += gxh * xhat[i];
                    }
                }
            }
            let n = (b * spatial) as f64;
            acc(grads, tape, *x, || {
                let mut gx = vec![0.0; g.len()];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * spatial;
                        for i in base..base + spatial {
                            let gxh = g[i] * gam[ch];
                            gx[i] = if *train {
                                inv_std[ch] * (gxh - sum_gxh[ch] / n - xhat[i] * sum_gxh_xh[ch] / n)
                            } else {
                                gxh * inv_std[ch]
                            };
                        }
                    }
                }
                gx
            });
            acc(grads, tape, *gamma, || gg);
            acc(grads, tape, *beta, || gbeta);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let gam = val(*gamma);
            let d = gam.len();
            let rows = g.len() / d;
            let mut gg = vec![0.0; d];
            let mut gbeta = vec![0.0; d];
            for r in 0..rows {
                for j in 0..d {
                    gg[j] += g[r * d + j] * xhat[r * d + j];
                    gbeta[j] += g[r * d + j];
                }
            }
            acc(grads, tape, *x, || {
                let mut gx = vec![0.0; g.len()];
                for r in 0..rows {
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for j in 0..d {
                        let gxh = g[r * d + j] * gam[j];
                        s1 += gxh;
                        s2 += gxh * xhat[r * d + j];
                    }
                    let dn = d as f64;
                    for j in 0..d {
                        let gxh = g[r * d + j] * gam[j];
                        gx[r * d + j] = inv_std[r] * (gxh - s1 / dn - xhat[r * d + j] * s2 / dn);
                    }
                }
                gx
            });
            acc(grads, tape, *gamma, || gg);
            acc(grads, tape, *beta, || gbeta);
        }
        Op::Attention { q, k, v, heads, probs } => {
            let s = tape.shape(*q);
            let (gq, gk, gv) =
                kernels::attention_backward(s[0], s[1], s[2], *heads, val(*q), val(*k), val(*v), probs, g);
            acc(grads, tape, *q, || gq);
            acc(grads, tape, *k, || gk);
            acc(grads, tape, *v, || gv);
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let b = labels.len();
            let c = if b == 0 { 0 } else { probs.len() / b };
            acc(grads, tape, *logits, || {
                let mut gl = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * c + l] -= 1.0;
                }
                let s = g[0] / b.max(1) as f64;
                gl.iter_mut().for_each(|v| *v *= s);
                gl
            });
        }
        Op::RowNormalize { x, norms } => {
            let y = tape.nodes[out.0].value.data();
            let rows = norms.len();
            let len = y.len() / rows.max(1);
            acc(grads, tape, *x, || {
                let mut gx = vec![0.0; y.len()];
                for r in 0..rows {
                    let span = r * len..(r + 1) * len;
                    let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum();
                    for i in span {
                        gx[i] = (g[i] - y[i] * dot) / norms[r];
                    }
                }
                gx
            });
        }
        Op::GroupScale { x, s, groups } => {
            let sv = val(*s);
            acc(grads, tape, *x, || g.iter().zip(groups).map(|(gi, &k)| gi * sv[k]).collect());
            acc(grads, tape, *s, || {
                let mut gs = vec![0.0; sv.len()];
                for ((gi, &k), xv) in g.iter().zip(groups).zip(val(*x)) {
                    gs[k] += gi * xv;
                }
                gs
            });
        }
        Op::MeanMid { x, outer, mid, inner } => acc(grads, tape, *x, || {
            let mut gx = vec![0.0; outer * mid * inner];
            let inv = 1.0 / *mid as f64;
            for o in 0..*outer {
                for m in 0..*mid {
                    for i in 0..*inner {
                        gx[(o * mid + m) * inner + i] = g[o * inner + i] * inv;
                    }
                }
            }
            gx
        }),
        Op::Patchify { x, dims } => {
            let [b, c, h, w, p] = *dims;
            acc(grads, tape, *x, || kernels::unpatchify(b, c, h, w, p, g));
        }
    }
}
