//! Empirical error decomposition and coefficient recoverability.
//!
//! Every "hat" here is a maximum over a finite sample set, so it is a lower
//! bound of the corresponding supremum over the full activation domain.
//! Activations are compared in the ℓ₂ norm per sample, weights in the
//! Frobenius norm.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grouping, Mode, Tape};
use crate::blocks::Block;
use crate::builder::{Method, Network, Unit};
use crate::error::{ReplError, Result};
use crate::replacement::{normalize_conv_kernel, ComputingLayer, Granularity, VitSynth, EPS_SYNTH};
use crate::tensor::{ParamId, Tensor};

/// Largest per-block Jacobian (output·input entries) built densely.
pub const MAX_JACOBIAN_ENTRIES: usize = 4096;

/// Per-sample ℓ₂ norms of the rows of a batch tensor.
pub fn row_norms(x: &Tensor) -> Vec<f64> {
    let n = x.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Vec::new();
    }
    x.data().chunks(x.len() / n).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

fn row_diff_norms(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    if a.shape() != b.shape() {
        return Err(ReplError::shape("row_diff_norms", "batch", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(row_norms(&a.zip_map(b, |x, y| x - y)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalError {
    pub eps_hat: f64,
    pub h_hat: f64,
}

/// `eps_hat = max ‖g(h) − f(h)‖ / max(‖h‖, 1)` and `H_hat = max ‖h‖` over
/// the rows of `samples`.
pub fn local_replacement_error<F, G>(f: F, g: G, samples: &Tensor) -> Result<LocalError>
where
    F: Fn(&Tensor) -> Result<Tensor>,
    G: Fn(&Tensor) -> Result<Tensor>,
{
    if samples.shape().first().copied().unwrap_or(0) == 0 {
        return Err(ReplError::invalid("local_replacement_error", "empty sample set"));
    }
    let hn = row_norms(samples);
    let d = row_diff_norms(&g(samples)?, &f(samples)?)?;
    let eps_hat = d.iter().zip(&hn).map(|(d, h)| d / h.max(1.0)).fold(0.0, f64::max);
    Ok(LocalError {
        eps_hat,
        h_hat: hn.iter().copied().fold(0.0, f64::max),
    })
}

/// `max ‖S(a) − S(b)‖ / ‖a − b‖` over paired rows of `a` and `b`.
pub fn amplification<S>(suffix: S, a: &Tensor, b: &Tensor) -> Result<f64>
where
    S: Fn(&Tensor) -> Result<Tensor>,
{
    let din = row_diff_norms(a, b)?;
    if let Some(i) = din.iter().position(|&d| d == 0.0) {
        return Err(ReplError::invalid("suffix_amplification", format!("probe pair {i} has zero distance")));
    }
    let dout = row_diff_norms(&suffix(a)?, &suffix(b)?)?;
    Ok(dout.iter().zip(&din).map(|(o, i)| o / i).fold(0.0, f64::max))
}

/// Empirical amplification of the units after `unit` (eval mode).
pub fn suffix_amplification(net: &Network, unit: usize, a: &Tensor, b: &Tensor) -> Result<f64> {
    let end = net.units.len();
    if unit >= end {
        return Err(ReplError::invalid("suffix_amplification", format!("unit {unit} out of range")));
    }
    amplification(|x| net.run_units(x, unit + 1..end), a, b)
}

/// Dense Jacobian `[out, in]` of unit `u` at a single sample `x` (`[1, ...]`).
pub fn unit_jacobian(net: &Network, u: usize, x: &Tensor) -> Result<DMatrix<f64>> {
    if x.shape().first() != Some(&1) {
        return Err(ReplError::shape("unit_jacobian", "batch", format!("expected one sample, got {:?}", x.shape())));
    }
    let y = net.run_units(x, u..u + 1)?;
    let (n_in, n_out) = (x.len(), y.len());
    if n_in * n_out > MAX_JACOBIAN_ENTRIES {
        return Err(ReplError::invalid(
            "unit_jacobian",
            format!("{n_out}x{n_in} Jacobian exceeds {MAX_JACOBIAN_ENTRIES} entries"),
        ));
    }
    let mut jac = DMatrix::zeros(n_out, n_in);
    for o in 0..n_out {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let yv = net.forward_units(&mut tape, xv, u..u + 1, Mode::Eval)?;
        let mut e = Tensor::zeros(y.shape());
        e.data_mut()[o] = 1.0;
        let ev = tape.constant(e);
        let p = tape.mul(yv, ev)?;
        let s = tape.sum(p);
        let g = tape.backward(s)?.wrt(xv);
        for (i, &v) in g.data().iter().enumerate() {
            jac[(o, i)] = v;
        }
    }
    Ok(jac)
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().iter().copied().fold(0.0, f64::max)
}

/// Product of per-unit Jacobian spectral norms along the suffix after
/// `unit`, evaluated on the trajectory of each row of `points`; the
/// maximum over rows. An upper proxy for the local amplification there.
pub fn jacobian_proxy(net: &Network, unit: usize, points: &Tensor) -> Result<f64> {
    let n = points.shape()[0];
    let mut best: f64 = 0.0;
    for i in 0..n {
        let mut h = points.slice_rows(i, 1);
        let mut prod = 1.0;
        for u in unit + 1..net.units.len() {
            prod *= spectral_norm(&unit_jacobian(net, u, &h)?);
            h = net.run_units(&h, u..u + 1)?;
        }
        best = best.max(prod);
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteError {
    pub owner: String,
    pub eps_hat: f64,
    pub h_hat: f64,
    pub pi_hat: f64,
    /// `‖hybrid_j(x) − hybrid_{j−1}(x)‖` per sample.
    pub terms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub sites: Vec<SiteError>,
    /// `‖F_repl(x) − F(x)‖` per sample.
    pub deviation: Vec<f64>,
    pub max_deviation: f64,
    /// `Σ_r Pi_hat · eps_hat · max(H_hat, 1)`.
    pub bound: f64,
}

fn slack(x: f64) -> f64 {
    1e-12 * (1.0 + x.abs())
}

/// Replaces the removed blocks of `reference` one at a time with the
/// computing layers of `repl` and decomposes the output deviation into the
/// per-site steps. Both decomposition inequalities are checked on every
/// sample; a violation is a [`ReplError::Consistency`].
pub fn telescoped_deviation(reference: &Network, repl: &Network, inputs: &Tensor) -> Result<ErrorReport> {
    if reference.plan != repl.plan || reference.units.len() != repl.units.len() {
        return Err(ReplError::invalid("telescoped_deviation", "networks have mismatched plans"));
    }
    if reference.spec.method != Method::E2e || repl.spec.method != Method::Repl {
        return Err(ReplError::invalid("telescoped_deviation", "expects an e2e reference and a repl network"));
    }
    let end = repl.units.len();
    let sites = repl.sites();
    let mut prev = reference.clone();
    let mut prev_out = prev.logits(inputs, Mode::Eval)?;
    let base = prev_out.clone();
    let mut report = Vec::new();
    for (j, site) in sites.iter().enumerate() {
        let next = Network::hybrid(reference, repl, j + 1)?;
        let u = site.unit;
        let h = prev.run_units(inputs, 0..u)?;
        let fh = prev.run_units(&h, u..u + 1)?;
        let gh = next.run_units(&h, u..u + 1)?;
        let local = local_replacement_error(|_| Ok(fh.clone()), |_| Ok(gh.clone()), &h)?;
        let sf = next.run_units(&fh, u + 1..end)?;
        let sg = next.run_units(&gh, u + 1..end)?;
        let din = row_diff_norms(&gh, &fh)?;
        let dout = row_diff_norms(&sg, &sf)?;
        let pi_hat = din
            .iter()
            .zip(&dout)
            .filter(|(i, _)| **i > 0.0)
            .map(|(i, o)| o / i)
            .fold(0.0, f64::max);
        let out = next.logits(inputs, Mode::Eval)?;
        let terms = row_diff_norms(&out, &prev_out)?;
        for (t, o) in terms.iter().zip(&dout) {
            if (t - o).abs() > slack(*t) {
                return Err(ReplError::Consistency(format!(
                    "hybrid step {j} differs from its suffix evaluation: {t} vs {o}"
                )));
            }
        }
        report.push(SiteError {
            owner: repl.units[u].owner(),
            eps_hat: local.eps_hat,
            h_hat: local.h_hat,
            pi_hat,
            terms,
        });
        prev = next;
        prev_out = out;
    }
    let deviation = row_diff_norms(&prev_out, &base)?;
    for (i, d) in deviation.iter().enumerate() {
        let sum: f64 = report.iter().map(|s| s.terms[i]).sum();
        if *d > sum + slack(sum) {
            return Err(ReplError::Consistency(format!("triangle inequality fails on sample {i}: {d} > {sum}")));
        }
    }
    let bound: f64 = report.iter().map(|s| s.pi_hat * s.eps_hat * s.h_hat.max(1.0)).sum();
    let max_deviation = deviation.iter().copied().fold(0.0, f64::max);
    if max_deviation > bound + slack(bound) {
        return Err(ReplError::Consistency(format!(
            "measured deviation {max_deviation} exceeds assembled bound {bound}"
        )));
    }
    Ok(ErrorReport {
        sites: report,
        deviation,
        max_deviation,
        bound,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// One entry per coefficient group.
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub residual: f64,
    pub rank_deficient: bool,
}

fn groups(shape: &[usize], grouping: Grouping) -> Result<(usize, Vec<usize>)> {
    let n = match grouping {
        Grouping::Scalar => 1,
        Grouping::Leading => shape.first().copied().unwrap_or(1),
        Grouping::ColumnHeads { heads } => {
            if shape.len() != 2 || heads == 0 || shape[1] % heads != 0 {
                return Err(ReplError::shape("best_fit_coeffs", "heads", format!("{shape:?} with {heads} heads")));
            }
            heads
        }
    };
    Ok((n, grouping.index_map(shape)))
}

fn anchors(prev: &Tensor, next: &Tensor, normalized: bool) -> Result<(Tensor, Tensor)> {
    Ok(if normalized {
        (normalize_conv_kernel(prev, EPS_SYNTH)?, normalize_conv_kernel(next, EPS_SYNTH)?)
    } else {
        (prev.clone(), next.clone())
    })
}

/// Minimum-norm least-squares solution of `[a b]·(α, β) ≈ t` from the
/// normal equations `G·(α, β) = r`. Returns the solution and whether `G`
/// is singular.
fn solve_pair(aa: f64, ab: f64, bb: f64, at: f64, bt: f64) -> ((f64, f64), bool) {
    let det = aa * bb - ab * ab;
    let scale = aa * bb;
    if scale > 0.0 && det > 1e-12 * scale {
        return (((bb * at - ab * bt) / det, (aa * bt - ab * at) / det), false);
    }
    // rank ≤ 1: G = λ·v·vᵀ, pseudo-inverse v·vᵀ/λ
    let lambda = aa + bb;
    if lambda == 0.0 {
        return ((0.0, 0.0), true);
    }
    let (vx, vy) = if aa >= bb { (aa, ab) } else { (ab, bb) };
    let n = (vx * vx + vy * vy).sqrt();
    let (vx, vy) = (vx / n, vy / n);
    let c = (vx * at + vy * bt) / lambda;
    ((c * vx, c * vy), true)
}

/// Frobenius residual `‖target − α·A − β·B‖` for given per-group coefficients.
pub fn fit_residual(
    target: &Tensor,
    prev: &Tensor,
    next: &Tensor,
    normalized: bool,
    grouping: Grouping,
    alpha: &[f64],
    beta: &[f64],
) -> Result<f64> {
    if target.shape() != prev.shape() || target.shape() != next.shape() {
        return Err(ReplError::shape("fit_residual", "operands", "target and anchors must share a shape"));
    }
    let (n, idx) = groups(target.shape(), grouping)?;
    if alpha.len() != n || beta.len() != n {
        return Err(ReplError::shape("fit_residual", "coefficients", format!("{n} groups")));
    }
    let (a, b) = anchors(prev, next, normalized)?;
    let s: f64 = (0..target.len())
        .map(|i| {
            let g = idx[i];
            let r = target.data()[i] - alpha[g] * a.data()[i] - beta[g] * b.data()[i];
            r * r
        })
        .sum();
    Ok(s.sqrt())
}

/// Least-squares `(α, β)` per group minimizing
/// `‖target − α·A − β·B‖_F`, with `A`, `B` the anchors (row-normalized when
/// `normalized`). Singular groups get the minimum-norm solution.
pub fn best_fit_coeffs(
    target: &Tensor,
    prev: &Tensor,
    next: &Tensor,
    normalized: bool,
    grouping: Grouping,
) -> Result<FitResult> {
    if target.shape() != prev.shape() || target.shape() != next.shape() {
        return Err(ReplError::shape(
            "best_fit_coeffs",
            "operands",
            format!("{:?}, {:?}, {:?}", target.shape(), prev.shape(), next.shape()),
        ));
    }
    let (n, idx) = groups(target.shape(), grouping)?;
    let (a, b) = anchors(prev, next, normalized)?;
    let mut sums = vec![[0.0f64; 5]; n];
    for (i, &g) in idx.iter().enumerate() {
        let (x, y, t) = (a.data()[i], b.data()[i], target.data()[i]);
        let s = &mut sums[g];
        s[0] += x * x;
        s[1] += x * y;
        s[2] += y * y;
        s[3] += x * t;
        s[4] += y * t;
    }
    let mut alpha = Vec::with_capacity(n);
    let mut beta = Vec::with_capacity(n);
    let mut rank_deficient = false;
    for s in &sums {
        let ((al, be), sing) = solve_pair(s[0], s[1], s[2], s[3], s[4]);
        alpha.push(al);
        beta.push(be);
        rank_deficient |= sing;
    }
    let residual = fit_residual(target, prev, next, normalized, grouping, &alpha, &beta)?;
    Ok(FitResult {
        alpha,
        beta,
        residual,
        rank_deficient,
    })
}

/// The operator a computing layer stands in for and the anchors it mixes,
/// as `(target, prev, next, normalized, grouping)`. The target comes from
/// the removed block in `reference`.
fn site_operands(reference: &Network, repl: &Network, unit: usize) -> Result<Option<(Tensor, Tensor, Tensor, bool, Grouping)>> {
    let Unit::Computing { layer, .. } = &repl.units[unit] else {
        return Err(ReplError::invalid("site_fit", format!("unit {unit} is not a computing layer")));
    };
    let Unit::Block { block, .. } = &reference.units[unit] else {
        return Err(ReplError::invalid("site_fit", format!("reference unit {unit} is not a block")));
    };
    let v = &repl.spec.variant;
    let get = |id: &ParamId| reference.store.get(id).cloned();
    let leading = if v.granularity == Granularity::Scalar {
        Grouping::Scalar
    } else {
        Grouping::Leading
    };
    Ok(match (layer, block) {
        (ComputingLayer::Basic(l), Block::Basic(b)) => Some((get(&b.conv1)?, get(&l.prev)?, get(&l.next)?, true, leading)),
        (ComputingLayer::Bottleneck(l), Block::Bottleneck(b)) => {
            Some((get(&b.conv2)?, get(&l.mid_prev)?, get(&l.mid_next)?, true, leading))
        }
        (ComputingLayer::Vit(l), Block::Vit(b)) => {
            if l.coeffs.is_none() || !l.use_attn {
                return Ok(None);
            }
            let (normalized, grouping) = match l.synth {
                VitSynth::Scalar => (false, Grouping::Scalar),
                VitSynth::Headwise => (true, Grouping::ColumnHeads { heads: l.heads }),
            };
            Some((get(&b.o.w)?, get(&l.proj_prev.w)?, get(&l.proj_next.w)?, normalized, grouping))
        }
        _ => return Err(ReplError::Consistency(format!("unit {unit}: block and computing layer disagree"))),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteFit {
    pub owner: String,
    pub fit: FitResult,
    /// Residual at the initial coefficients (all 0.5).
    pub residual_init: f64,
}

/// Best-fit coefficients of every computing layer against the removed
/// block's weights in `reference`. ViT sites without a projection branch
/// are skipped.
pub fn site_fits(reference: &Network, repl: &Network) -> Result<Vec<SiteFit>> {
    let mut out = Vec::new();
    for site in repl.sites() {
        let Some((t, p, n, norm, g)) = site_operands(reference, repl, site.unit)? else {
            continue;
        };
        let fit = best_fit_coeffs(&t, &p, &n, norm, g)?;
        let k = fit.alpha.len();
        let half = vec![0.5; k];
        let residual_init = fit_residual(&t, &p, &n, norm, g, &half, &half)?;
        out.push(SiteFit {
            owner: repl.units[site.unit].owner(),
            fit,
            residual_init,
        });
    }
    Ok(out)
}
