//! Slice-level numeric kernels shared by the tape and the static deploy path.
//!
//! Layouts: images are `[B, C, H, W]`, token tensors `[B, T, d]`, linear
//! weights `[out, in]`, conv kernels `[out, in, kh, kw]`. All row-major.

use std::fmt::Debug;

use num_traits::Float;

/// Floating-point element type usable by the kernels.
pub trait Scalar: Float + Debug + Default + Send + Sync + 'static {
    /// `c <- alpha * a * b + beta * c` for strided `m×k` times `k×n`.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing (for `c`)
    /// regions for the given extents.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

/// Strided matrix view: base slice plus row and column strides.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn rows(data: &'a [T], cols: usize) -> Self {
        MatRef { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        MatRef { data, rs: 1, cs: cols }
    }
}

/// `c[m×n] (rs_c, 1) <- a·b + beta·c`.
fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    beta: T,
    c: &mut [T],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j] = beta * c[i * rsc + j];
            }
        }
        return;
    }
    let need_a = (m - 1) * a.rs + (k - 1) * a.cs + 1;
    let need_b = (k - 1) * b.rs + (n - 1) * b.cs + 1;
    let need_c = (m - 1) * rsc + n;
    assert!(a.data.len() >= need_a && b.data.len() >= need_b && c.len() >= need_c);
    // SAFETY: extents checked above; `c` is a unique borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[oy * ow + ox] = if iy >= 0
                            && (iy as usize) < g.h
                            && ix >= 0
                            && (ix as usize) < g.w
                        {
                            x[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], gx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        let at = (c * g.h + iy as usize) * g.w + ix as usize;
                        gx[at] = gx[at] + src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding; optional per-output-channel bias.
pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (k, p) = (g.patch(), g.positions());
    let mut out = vec![T::zero(); g.batch * g.cout * p];
    let mut cols = vec![T::zero(); k * p];
    let in_stride = g.cin * g.h * g.w;
    for b in 0..g.batch {
        im2col(g, &x[b * in_stride..(b + 1) * in_stride], &mut cols);
        let dst = &mut out[b * g.cout * p..(b + 1) * g.cout * p];
        gemm(
            g.cout,
            k,
            p,
            MatRef::rows(w, k),
            MatRef::rows(&cols, p),
            T::zero(),
            dst,
            p,
        );
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                for v in &mut dst[co * p..(co + 1) * p] {
                    *v = *v + bv;
                }
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_w)` for a bias-free convolution.
pub fn conv2d_backward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], gout: &[T]) -> (Vec<T>, Vec<T>) {
    let (k, p) = (g.patch(), g.positions());
    let in_stride = g.cin * g.h * g.w;
    let mut gx = vec![T::zero(); g.batch * in_stride];
    let mut gw = vec![T::zero(); g.cout * k];
    let mut cols = vec![T::zero(); k * p];
    let mut gcols = vec![T::zero(); k * p];
    for b in 0..g.batch {
        let xb = &x[b * in_stride..(b + 1) * in_stride];
        let gb = &gout[b * g.cout * p..(b + 1) * g.cout * p];
        im2col(g, xb, &mut cols);
        // gw += gout_b · colsᵀ
        gemm(
            g.cout,
            p,
            k,
            MatRef::rows(gb, p),
            MatRef::transposed(&cols, p),
            T::one(),
            &mut gw,
            k,
        );
        // gcols = wᵀ · gout_b
        gemm(
            k,
            g.cout,
            p,
            MatRef::transposed(w, k),
            MatRef::rows(gb, p),
            T::zero(),
            &mut gcols,
            p,
        );
        col2im_add(g, &gcols, &mut gx[b * in_stride..(b + 1) * in_stride]);
    }
    (gx, gw)
}

/// `y[rows×dout] = x[rows×din] · wᵀ + b`.
pub fn linear_forward<T: Scalar>(
    rows: usize,
    din: usize,
    dout: usize,
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
) -> Vec<T> {
    let mut y = vec![T::zero(); rows * dout];
    if let Some(b) = b {
        for r in 0..rows {
            y[r * dout..(r + 1) * dout].copy_from_slice(b);
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    gemm(
        rows,
        din,
        dout,
        MatRef::rows(x, din),
        MatRef::transposed(w, din),
        beta,
        &mut y,
        dout,
    );
    y
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn linear_backward<T: Scalar>(
    rows: usize,
    din: usize,
    dout: usize,
    x: &[T],
    w: &[T],
    gy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); rows * din];
    gemm(
        rows,
        dout,
        din,
        MatRef::rows(gy, dout),
        MatRef::rows(w, din),
        T::zero(),
        &mut gx,
        din,
    );
    let mut gw = vec![T::zero(); dout * din];
    gemm(
        dout,
        rows,
        din,
        MatRef::transposed(gy, dout),
        MatRef::rows(x, din),
        T::zero(),
        &mut gw,
        din,
    );
    let mut gb = vec![T::zero(); dout];
    for r in 0..rows {
        for (o, g) in gb.iter_mut().enumerate() {
            *g = *g + gy[r * dout + o];
        }
    }
    (gx, gw, gb)
}

/// Multi-head scaled dot-product attention over `[B, T, d]` inputs.
/// Returns the attended values and the softmax weights `[B, H, T, T]`.
pub fn attention_forward<T: Scalar>(
    batch: usize,
    tokens: usize,
    dim: usize,
    heads: usize,
    q: &[T],
    k: &[T],
    v: &[T],
) -> (Vec<T>, Vec<T>) {
    let dh = dim / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); batch * tokens * dim];
    let mut probs = vec![T::zero(); batch * heads * tokens * tokens];
    let tt = tokens * tokens;
    for b in 0..batch {
        let base = b * tokens * dim;
        for h in 0..heads {
            let off = base + h * dh;
            let p = &mut probs[(b * heads + h) * tt..(b * heads + h + 1) * tt];
            gemm(
                tokens,
                dh,
                tokens,
                MatRef { data: &q[off..], rs: dim, cs: 1 },
                MatRef { data: &k[off..], rs: 1, cs: dim },
                T::zero(),
                p,
                tokens,
            );
            for row in p.chunks_mut(tokens) {
                let mut mx = T::neg_infinity();
                for s in row.iter_mut() {
                    *s = *s * scale;
                    mx = mx.max(*s);
                }
                let mut sum = T::zero();
                for s in row.iter_mut() {
                    *s = (*s - mx).exp();
                    sum = sum + *s;
                }
                for s in row.iter_mut() {
                    *s = *s / sum;
                }
            }
            gemm(
                tokens,
                tokens,
                dh,
                MatRef::rows(p, tokens),
                MatRef { data: &v[off..], rs: dim, cs: 1 },
                T::zero(),
                &mut out[off..],
                dim,
            );
        }
    }
    (out, probs)
}

/// Returns `(grad_q, grad_k, grad_v)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    batch: usize,
    tokens: usize,
    dim: usize,
    heads: usize,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    gout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = dim / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let n = batch * tokens * dim;
    let (mut gq, mut gk, mut gv) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
    let tt = tokens * tokens;
    let mut gp = vec![T::zero(); tt];
    for b in 0..batch {
        let base = b * tokens * dim;
        for h in 0..heads {
            let off = base + h * dh;
            let p = &probs[(b * heads + h) * tt..(b * heads + h + 1) * tt];
            // gV_h = Pᵀ · gO_h
            gemm(
                tokens,
                tokens,
                dh,
                MatRef::transposed(p, tokens),
                MatRef { data: &gout[off..], rs: dim, cs: 1 },
                T::zero(),
                &mut gv[off..],
                dim,
            );
            // gP = gO_h · V_hᵀ
            gemm(
                tokens,
                dh,
                tokens,
                MatRef { data: &gout[off..], rs: dim, cs: 1 },
                MatRef { data: &v[off..], rs: 1, cs: dim },
                T::zero(),
                &mut gp,
                tokens,
            );
            // softmax backward, then the score scaling
            for (grow, prow) in gp.chunks_mut(tokens).zip(p.chunks(tokens)) {
                let dot = grow
                    .iter()
                    .zip(prow)
                    .fold(T::zero(), |acc, (&g, &pp)| acc + g * pp);
                for (g, &pp) in grow.iter_mut().zip(prow) {
                    *g = pp * (*g - dot) * scale;
                }
            }
            gemm(
                tokens,
                tokens,
                dh,
                MatRef::rows(&gp, tokens),
                MatRef { data: &k[off..], rs: dim, cs: 1 },
                T::zero(),
                &mut gq[off..],
                dim,
            );
            gemm(
                tokens,
                tokens,
                dh,
                MatRef::transposed(&gp, tokens),
                MatRef { data: &q[off..], rs: dim, cs: 1 },
                T::zero(),
                &mut gk[off..],
                dim,
            );
        }
    }
    (gq, gk, gv)
}

/// Last-axis layer normalization. Returns `(y, xhat, inv_std)`.
pub fn layer_norm_forward<T: Scalar>(
    rows: usize,
    d: usize,
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); rows * d];
    let mut xhat = vec![T::zero(); rows * d];
    let mut inv = vec![T::zero(); rows];
    let dn = T::from_f64(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().fold(T::zero(), |a, &v| a + v) / dn;
        let var = xr.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / dn;
        let is = T::one() / (var + T::from_f64(eps)).sqrt();
        inv[r] = is;
        for j in 0..d {
            let xh = (xr[j] - mean) * is;
            xhat[r * d + j] = xh;
            y[r * d + j] = gamma[j] * xh + beta[j];
        }
    }
    (y, xhat, inv)
}

pub fn relu<T: Scalar>(x: T) -> T {
    x.max(T::zero())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let u = T::from_f64(GELU_C) * (x + T::from_f64(GELU_A) * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `[B, C, H, W]` image to `[B, T, C·p·p]` non-overlapping patches,
/// patches in raster order, features ordered `(c, py, px)`.
pub fn patchify<T: Scalar>(b: usize, c: usize, h: usize, w: usize, p: usize, x: &[T]) -> Vec<T> {
    let (gh, gw) = (h / p, w / p);
    let feat = c * p * p;
    let t = gh * gw;
    let mut out = vec![T::zero(); b * t * feat];
    for bi in 0..b {
        for ty in 0..gh {
            for tx in 0..gw {
                let tok = ty * gw + tx;
                for ci in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            let f = (ci * p + py) * p + px;
                            let src = ((bi * c + ci) * h + ty * p + py) * w + tx * p + px;
                            out[(bi * t + tok) * feat + f] = x[src];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`patchify`].
pub fn unpatchify<T: Scalar>(b: usize, c: usize, h: usize, w: usize, p: usize, g: &[T]) -> Vec<T> {
    let (gh, gw) = (h / p, w / p);
    let feat = c * p * p;
    let t = gh * gw;
    let mut out = vec![T::zero(); b * c * h * w];
    for bi in 0..b {
        for ty in 0..gh {
            for tx in 0..gw {
                let tok = ty * gw + tx;
                for ci in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            let f = (ci * p + py) * p + px;
                            let dst = ((bi * c + ci) * h + ty * p + py) * w + tx * p + px;
                            out[dst] = g[(bi * t + tok) * feat + f];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Mean over the middle axis of an `[outer, mid, inner]` view.
pub fn mean_mid<T: Scalar>(outer: usize, mid: usize, inner: usize, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); outer * inner];
    let inv = T::one() / T::from_f64(mid as f64);
    for o in 0..outer {
        for m in 0..mid {
            let src = &x[(o * mid + m) * inner..(o * mid + m + 1) * inner];
            for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *acc = *acc + v;
            }
        }
    }
    for v in &mut out {
        *v = *v * inv;
    }
    out
}
