//! Naive loop implementations used as independent oracles in unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::ParamStore;
use crate::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, q) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - q) / stride + 1;
    let ow = (wd + 2 * pad - q) / stride + 1;
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; b * co * oh * ow];
    for n in 0..b {
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = 0.0;
                    for c in 0..ci {
                        for ki in 0..q {
                            for kj in 0..q {
                                let yi = (i * stride + ki) as isize - pad as isize;
                                let xj = (j * stride + kj) as isize - pad as isize;
                                if yi < 0 || xj < 0 || yi >= h as isize || xj >= wd as isize {
                                    continue;
                                }
                                s += xd[((n * ci + c) * h + yi as usize) * wd + xj as usize]
                                    * wdat[((o * ci + c) * q + ki) * q + kj];
                            }
                        }
                    }
                    out[((n * co + o) * oh + i) * ow + j] = s;
                }
            }
        }
    }
    Tensor::from_vec(&[b, co, oh, ow], out)
}

/// Batch norm; `stats = None` means batch statistics (biased variance).
pub fn bn(x: &Tensor, gamma: &Tensor, beta: &Tensor, stats: Option<(&Tensor, &Tensor)>, eps: f64) -> Tensor {
    let s = x.shape();
    let (b, c) = (s[0], s[1]);
    let sp: usize = s[2..].iter().product();
    let mut out = x.clone();
    for ch in 0..c {
        let vals: Vec<f64> = (0..b)
            .flat_map(|n| (0..sp).map(move |i| (n * c + ch) * sp + i))
            .map(|i| x.data()[i])
            .collect();
        let (m, v) = match stats {
            Some((mu, var)) => (mu.data()[ch], var.data()[ch]),
            None => {
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                (m, vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64)
            }
        };
        for n in 0..b {
            for i in 0..sp {
                let k = (n * c + ch) * sp + i;
                out.data_mut()[k] = gamma.data()[ch] * (x.data()[k] - m) / (v + eps).sqrt() + beta.data()[ch];
            }
        }
    }
    out
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn gelu(x: &Tensor) -> Tensor {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    x.map(|v| 0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh()))
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    a.zip_map(b, |x, y| x + y).unwrap()
}

/// `x[..., din] · wᵀ + b`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (dout, din) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / din;
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        for o in 0..dout {
            let mut s = b.map_or(0.0, |b| b.data()[o]);
            for i in 0..din {
                s += x.data()[r * din + i] * w.data()[o * din + i];
            }
            out[r * dout + o] = s;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::from_vec(&shape, out)
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let d = *x.shape().last().unwrap();
    let mut out = x.clone();
    for (r, row) in x.data().chunks(d).enumerate() {
        let m = row.iter().sum::<f64>() / d as f64;
        let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / d as f64;
        for j in 0..d {
            out.data_mut()[r * d + j] = gamma.data()[j] * (row[j] - m) / (v + eps).sqrt() + beta.data()[j];
        }
    }
    out
}

/// Softmax attention on projected `q, k, v: [B,T,d]`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Tensor {
    let (b, t, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let dh = d / heads;
    let mut out = Tensor::zeros(&[b, t, d]);
    for n in 0..b {
        for h in 0..heads {
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| {
                        (0..dh)
                            .map(|e| q.data()[(n * t + i) * d + h * dh + e] * k.data()[(n * t + j) * d + h * dh + e])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for e in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..t {
                        acc += (scores[j] - mx).exp() / z * v.data()[(n * t + j) * d + h * dh + e];
                    }
                    out.data_mut()[(n * t + i) * d + h * dh + e] = acc;
                }
            }
        }
    }
    out
}

/// Row-wise unit normalization with eps guard over the leading axis.
pub fn row_norm(w: &Tensor, eps: f64) -> Tensor {
    let rows = w.shape()[0];
    let len = w.len() / rows;
    let mut out = w.clone();
    for r in 0..rows {
        let n = (w.data()[r * len..(r + 1) * len].iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
        for v in &mut out.data_mut()[r * len..(r + 1) * len] {
            *v /= n;
        }
    }
    out
}

/// Scalar `sum(y ⊙ r)` with fixed random `r`.
pub fn probe(tape: &mut crate::autodiff::Tape, y: crate::autodiff::Var, seed: u64) -> crate::error::Result<crate::autodiff::Var> {
    let r = Tensor::randn(tape.shape(y), 1.0, &mut rng(seed ^ 0x9e37));
    let rv = tape.constant(r);
    let m = tape.mul(y, rv)?;
    Ok(tape.sum(m))
}

/// Replaces every entry with random values: variances in [0.5, 2.5],
/// gammas in [0.5, 1.5], everything else Gaussian. Frozen coefficients
/// keep their value.
pub fn randomize(store: &mut ParamStore, seed: u64) {
    let mut g = rng(seed);
    for (id, e) in store.iter_mut() {
        if !e.trainable && e.kind == crate::params::ParamKind::Coeff {
            continue;
        }
        let shape = e.value.shape().to_vec();
        e.value = if id.role().ends_with("_var") {
            Tensor::uniform(&shape, 1.0, &mut g).map(|v| v + 1.5)
        } else if id.role().ends_with("_gamma") {
            Tensor::uniform(&shape, 0.5, &mut g).map(|v| v + 1.0)
        } else {
            Tensor::randn(&shape, 0.5, &mut g)
        };
    }
}

