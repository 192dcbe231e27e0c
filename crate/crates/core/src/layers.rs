//! Layer kernels: 2-D convolution, max pooling, batch normalization,
//! fully-connected layers, the max feature map activation, softmax and
//! soft-target cross-entropy.
//!
//! Feature maps are laid out `(N, C, T, F)`: batch, channels, time frames,
//! frequency bins. Every kernel is a tape operation with its own backward
//! rule; the layer structs at the bottom bind them to a [`ParamStore`].

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

const AXIS_NAMES: [&str; 2] = ["time", "frequency"];

/// Output extent of a convolution along one axis:
/// `floor((len + 2 * pad - kernel) / stride) + 1`.
pub fn conv_out_extent(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

/// Output extent of an unpadded max pool. In ceil mode the last window may
/// hang over the edge but must start inside the input.
pub fn pool_out_extent(len: usize, kernel: usize, stride: usize, ceil_mode: bool) -> Option<usize> {
    if stride == 0 || kernel == 0 {
        return None;
    }
    let num = len as i64 - kernel as i64;
    let s = stride as i64;
    let mut out = if ceil_mode {
        -((-num).div_euclid(s)) + 1
    } else {
        num.div_euclid(s) + 1
    };
    if ceil_mode && (out - 1) * s >= len as i64 {
        out -= 1;
    }
    (out >= 1).then_some(out as usize)
}

/// Stride and explicit per-side padding of a convolution, `(time, frequency)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry { stride: (1, 1), padding: (0, 0) }
    }
}

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }
}

fn im2col<T: Real>(x: &[T], d: &ConvDims, cols: &mut [T]) {
    let plane = d.oh * d.ow;
    for ci in 0..d.c {
        let xc = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (ci * d.kh + ki) * d.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..d.oh {
                    let iy = (oy * d.sh + ki) as isize - d.ph as isize;
                    let out = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * d.sw + kj) as isize - d.pw as isize;
                        *o = if ix < 0 || ix >= d.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], d: &ConvDims, dx: &mut [T]) {
    let plane = d.oh * d.ow;
    for ci in 0..d.c {
        let xc = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (ci * d.kh + ki) * d.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..d.oh {
                    let iy = (oy * d.sh + ki) as isize - d.ph as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.ow {
                        let ix = (ox * d.sw + kj) as isize - d.pw as isize;
                        if ix >= 0 && (ix as usize) < d.w {
                            dst[ix as usize] = dst[ix as usize] + src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x (N,C,T,F)` with `weight (K,C,kt,kf)` plus an
/// optional per-output-channel bias.
pub fn conv2d<'t, T: Real>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    geom: ConvGeometry,
) -> Result<Var<'t, T>> {
    let (xv, wv) = (x.value(), weight.value());
    let (xs, ws) = (xv.shape(), wv.shape());
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::shape("conv2d", format!("input {xs:?}, weight {ws:?}: both must be rank 4")));
    }
    if xs[1] != ws[1] {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, weight expects {}", xs[1], ws[1]),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [ws[0]] {
            return Err(Error::shape("conv2d", format!("bias {:?} for {} filters", b.shape(), ws[0])));
        }
    }
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    if sh == 0 || sw == 0 {
        return Err(Error::contract("conv2d", "stride must be at least 1"));
    }
    let mut extents = [0usize; 2];
    for (axis, ext) in extents.iter_mut().enumerate() {
        let (len, k) = (xs[2 + axis], ws[2 + axis]);
        let (s, p) = if axis == 0 { (sh, ph) } else { (sw, pw) };
        *ext = conv_out_extent(len, k, s, p).ok_or_else(|| {
            Error::contract(
                "conv2d",
                format!(
                    "degenerate {} extent: input {len}, kernel {k}, padding {p}",
                    AXIS_NAMES[axis]
                ),
            )
        })?;
    }
    let d = ConvDims {
        n: xs[0],
        c: xs[1],
        h: xs[2],
        w: xs[3],
        k: ws[0],
        kh: ws[2],
        kw: ws[3],
        sh,
        sw,
        ph,
        pw,
        oh: extents[0],
        ow: extents[1],
    };
    let plane = d.oh * d.ow;
    let patch = d.patch();
    let mut out = vec![T::zero(); d.n * d.k * plane];
    let mut cols = if d.pointwise() { Vec::new() } else { vec![T::zero(); patch * plane] };
    let bias_v = bias.map(|b| b.value());
    for n in 0..d.n {
        let xn = &xv.data()[n * d.c * d.h * d.w..(n + 1) * d.c * d.h * d.w];
        let on = &mut out[n * d.k * plane..(n + 1) * d.k * plane];
        let b_mat: &[T] = if d.pointwise() {
            xn
        } else {
            im2col(xn, &d, &mut cols);
            &cols
        };
        T::gemm(d.k, patch, plane, T::one(), wv.data(), false, b_mat, false, T::zero(), on);
        if let Some(b) = &bias_v {
            for (row, &bk) in on.chunks_mut(plane).zip(b.data()) {
                row.iter_mut().for_each(|v| *v = *v + bk);
            }
        }
    }
    let out = Tensor::new(vec![d.n, d.k, d.oh, d.ow], out)?;
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    Ok(x.tape().record("conv2d", &inputs, out, move |ctx| {
        let (xv, wv, g) = (&ctx.inputs[0], &ctx.inputs[1], ctx.grad.data());
        let mut dx = ctx.needs[0].then(|| vec![T::zero(); xv.numel()]);
        let mut dw = ctx.needs[1].then(|| vec![T::zero(); wv.numel()]);
        let mut cols = vec![T::zero(); if d.pointwise() { 0 } else { patch * plane }];
        let mut dcols = vec![T::zero(); if dx.is_some() { patch * plane } else { 0 }];
        for n in 0..d.n {
            let gn = &g[n * d.k * plane..(n + 1) * d.k * plane];
            let xn = &xv.data()[n * d.c * d.h * d.w..(n + 1) * d.c * d.h * d.w];
            if let Some(dw) = dw.as_mut() {
                let b_mat: &[T] = if d.pointwise() {
                    xn
                } else {
                    im2col(xn, &d, &mut cols);
                    &cols
                };
                T::gemm(d.k, plane, patch, T::one(), gn, false, b_mat, true, T::one(), dw);
            }
            if let Some(dx) = dx.as_mut() {
                let dxn = &mut dx[n * d.c * d.h * d.w..(n + 1) * d.c * d.h * d.w];
                if d.pointwise() {
                    T::gemm(patch, d.k, plane, T::one(), wv.data(), true, gn, false, T::zero(), dxn);
                } else {
                    T::gemm(patch, d.k, plane, T::one(), wv.data(), true, gn, false, T::zero(), &mut dcols);
                    col2im(&dcols, &d, dxn);
                }
            }
        }
        let mut grads = vec![
            dx.map(|v| Tensor::new(xv.shape().to_vec(), v).unwrap()),
            dw.map(|v| Tensor::new(wv.shape().to_vec(), v).unwrap()),
        ];
        if ctx.inputs.len() == 3 {
            grads.push(ctx.needs[2].then(|| {
                let mut db = vec![T::zero(); d.k];
                for (i, row) in g.chunks(plane).enumerate() {
                    db[i % d.k] = db[i % d.k] + row.iter().copied().sum();
                }
                Tensor::new(vec![d.k], db).unwrap()
            }));
        }
        grads
    }))
}

/// Unpadded 2-D max pooling over the last two axes of `(N,C,T,F)`. Windows
/// that overhang the edge in ceil mode only see in-range elements. The
/// gradient goes to the first maximal element of each window.
pub fn maxpool2d<'t, T: Real>(
    x: Var<'t, T>,
    kernel: (usize, usize),
    stride: (usize, usize),
    ceil_mode: bool,
) -> Result<Var<'t, T>> {
    let xv = x.value();
    let xs = xv.shape();
    if xs.len() != 4 {
        return Err(Error::shape("maxpool2d", format!("input {xs:?} must be rank 4")));
    }
    let (h, w) = (xs[2], xs[3]);
    let oh = pool_out_extent(h, kernel.0, stride.0, ceil_mode);
    let ow = pool_out_extent(w, kernel.1, stride.1, ceil_mode);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(Error::contract(
            "maxpool2d",
            format!("input {h}x{w} too small for kernel {kernel:?} stride {stride:?}"),
        ));
    };
    let planes = xs[0] * xs[1];
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    let data = xv.data();
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            let y0 = oy * stride.0;
            let y1 = (y0 + kernel.0).min(h);
            for ox in 0..ow {
                let x0 = ox * stride.1;
                let x1 = (x0 + kernel.1).min(w);
                let mut best = base + y0 * w + x0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let i = base + y * w + xx;
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    let in_shape = xs.to_vec();
    let out = Tensor::new(vec![xs[0], xs[1], oh, ow], out)?;
    Ok(x.tape().record("maxpool2d", &[x], out, move |ctx| {
        let mut dx = vec![T::zero(); in_shape.iter().product()];
        for (&i, &g) in argmax.iter().zip(ctx.grad.data()) {
            dx[i] = dx[i] + g;
        }
        vec![Some(Tensor::new(in_shape.clone(), dx).unwrap())]
    }))
}

/// Per-channel statistics from a training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats<T: Real> {
    pub mean: Vec<T>,
    /// Unbiased variance, used for the running estimate.
    pub var: Vec<T>,
}

pub enum NormMode<'a, T: Real> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running estimates.
    Eval { running_mean: &'a Tensor<T>, running_var: &'a Tensor<T> },
}

fn channel_view(shape: &[usize]) -> (usize, usize, usize) {
    let inner: usize = shape[2..].iter().product();
    (shape[0], shape[1], inner)
}

/// Batch normalization over `(N, C, ...)` with per-channel `gamma`/`beta`.
pub fn batch_norm<'t, T: Real>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    mode: NormMode<'_, T>,
    eps: f64,
) -> Result<(Var<'t, T>, Option<BatchStats<T>>)> {
    let xv = x.value();
    let xs = xv.shape();
    if xs.len() < 2 {
        return Err(Error::shape("batchnorm", format!("input {xs:?} has no channel axis")));
    }
    let (n, c, inner) = channel_view(xs);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batchnorm",
            format!("{c} channels but gamma {:?}, beta {:?}", gamma.shape(), beta.shape()),
        ));
    }
    let count = n * inner;
    let data = xv.data();
    let eps_t = T::lit(eps);
    let (mean, inv_std, stats) = match mode {
        NormMode::Train => {
            if count < 2 {
                return Err(Error::contract(
                    "batchnorm",
                    format!("training mode needs N*T*F >= 2, got {count}"),
                ));
            }
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = 0.0f64;
                for b in 0..n {
                    let off = (b * c + ch) * inner;
                    s += data[off..off + inner].iter().map(|v| v.to_f64().unwrap()).sum::<f64>();
                }
                let m = s / count as f64;
                let mut ss = 0.0f64;
                for b in 0..n {
                    let off = (b * c + ch) * inner;
                    ss += data[off..off + inner]
                        .iter()
                        .map(|v| (v.to_f64().unwrap() - m).powi(2))
                        .sum::<f64>();
                }
                mean[ch] = T::lit(m);
                var[ch] = T::lit(ss / count as f64);
            }
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
            let unbiased_scale = T::lit(count as f64 / (count - 1) as f64);
            let stats = BatchStats { mean: mean.clone(), var: var.iter().map(|&v| v * unbiased_scale).collect() };
            (mean, inv_std, Some(stats))
        }
        NormMode::Eval { running_mean, running_var } => {
            if running_mean.shape() != [c] || running_var.shape() != [c] {
                return Err(Error::shape("batchnorm", "running statistics do not match channels"));
            }
            let inv_std = running_var.data().iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
            (running_mean.data().to_vec(), inv_std, None)
        }
    };
    let training = stats.is_some();
    let (gv, bv) = (gamma.value(), beta.value());
    let mut xhat = vec![T::zero(); data.len()];
    let mut out = vec![T::zero(); data.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            let (m, is, g, be) = (mean[ch], inv_std[ch], gv.data()[ch], bv.data()[ch]);
            for i in off..off + inner {
                xhat[i] = (data[i] - m) * is;
                out[i] = g * xhat[i] + be;
            }
        }
    }
    let shape = xs.to_vec();
    let out = Tensor::new(shape.clone(), out)?;
    let var = x.tape().record("batchnorm", &[x, gamma, beta], out, move |ctx| {
        let g = ctx.grad.data();
        let gamma = ctx.inputs[1].data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                for i in off..off + inner {
                    dgamma[ch] = dgamma[ch] + g[i] * xhat[i];
                    dbeta[ch] = dbeta[ch] + g[i];
                }
            }
        }
        let dx = ctx.needs[0].then(|| {
            let mut dx = vec![T::zero(); g.len()];
            let m = T::from_usize(count).unwrap();
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * inner;
                    let scale = gamma[ch] * inv_std[ch];
                    for i in off..off + inner {
                        dx[i] = if training {
                            scale * (g[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                        } else {
                            scale * g[i]
                        };
                    }
                }
            }
            Tensor::new(shape.clone(), dx).unwrap()
        });
        vec![
            dx,
            ctx.needs[1].then(|| Tensor::new(vec![c], dgamma).unwrap()),
            ctx.needs[2].then(|| Tensor::new(vec![c], dbeta).unwrap()),
        ]
    });
    Ok((var, stats))
}

/// `x (N,D) * weight (O,D)^T + bias (O)`.
pub fn linear<'t, T: Real>(x: Var<'t, T>, weight: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
    let (xv, wv, bv) = (x.value(), weight.value(), bias.value());
    let (xs, ws) = (xv.shape(), wv.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bv.shape() != [ws[0]] {
        return Err(Error::shape(
            "linear",
            format!("input {xs:?}, weight {ws:?}, bias {:?}", bv.shape()),
        ));
    }
    let (n, d, o) = (xs[0], xs[1], ws[0]);
    let mut out = vec![T::zero(); n * o];
    for row in out.chunks_mut(o) {
        row.copy_from_slice(bv.data());
    }
    T::gemm(n, d, o, T::one(), xv.data(), false, wv.data(), true, T::one(), &mut out);
    let out = Tensor::new(vec![n, o], out)?;
    Ok(x.tape().record("linear", &[x, weight, bias], out, move |ctx| {
        let (xv, wv, g) = (&ctx.inputs[0], &ctx.inputs[1], ctx.grad.data());
        let dx = ctx.needs[0].then(|| {
            let mut dx = vec![T::zero(); n * d];
            T::gemm(n, o, d, T::one(), g, false, wv.data(), false, T::zero(), &mut dx);
            Tensor::new(vec![n, d], dx).unwrap()
        });
        let dw = ctx.needs[1].then(|| {
            let mut dw = vec![T::zero(); o * d];
            T::gemm(o, n, d, T::one(), g, true, xv.data(), false, T::zero(), &mut dw);
            Tensor::new(vec![o, d], dw).unwrap()
        });
        let db = ctx.needs[2].then(|| {
            let mut db = vec![T::zero(); o];
            for row in g.chunks(o) {
                for (a, &v) in db.iter_mut().zip(row) {
                    *a = *a + v;
                }
            }
            Tensor::new(vec![o], db).unwrap()
        });
        vec![dx, dw, db]
    }))
}

/// Max feature map: splits axis 1 into halves `[0, M)` and `[M, 2M)` and
/// keeps the elementwise maximum. Works on `(N, 2M)` and `(N, 2M, T, F)`.
/// Ties pick the first half, and the gradient follows the winner.
pub fn mfm<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let xv = x.value();
    let xs = xv.shape();
    if xs.len() < 2 {
        return Err(Error::shape("mfm", format!("input {xs:?} has no channel axis")));
    }
    if xs[1] % 2 != 0 {
        return Err(Error::contract("mfm", format!("channel extent {} is odd", xs[1])));
    }
    let (n, c, inner) = channel_view(xs);
    let half = c / 2;
    let data = xv.data();
    let mut out = Vec::with_capacity(data.len() / 2);
    let mut first_wins = Vec::with_capacity(data.len() / 2);
    for b in 0..n {
        let lo = &data[b * c * inner..(b * c + half) * inner];
        let hi = &data[(b * c + half) * inner..(b + 1) * c * inner];
        for (&a, &z) in lo.iter().zip(hi) {
            let win = a >= z;
            first_wins.push(win);
            out.push(if win { a } else { z });
        }
    }
    let in_shape = xs.to_vec();
    let mut out_shape = in_shape.clone();
    out_shape[1] = half;
    let out = Tensor::new(out_shape, out)?;
    Ok(x.tape().record("mfm", &[x], out, move |ctx| {
        let g = ctx.grad.data();
        let mut dx = vec![T::zero(); n * c * inner];
        let block = half * inner;
        for b in 0..n {
            for i in 0..block {
                let o = b * block + i;
                let target = if first_wins[o] { b * c * inner + i } else { b * c * inner + block + i };
                dx[target] = g[o];
            }
        }
        vec![Some(Tensor::new(in_shape.clone(), dx).unwrap())]
    }))
}

fn softmax_rows<T: Real>(data: &[T], classes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(classes) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}

fn check_logits(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        return Err(Error::shape(op, format!("logits {shape:?} must be (N, C)")));
    }
    Ok((shape[0], shape[1]))
}

/// Row-wise softmax of `(N, C)` logits, computed with max subtraction.
pub fn softmax<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let xv = x.value();
    let (_, c) = check_logits("softmax", xv.shape())?;
    let out = Tensor::new(xv.shape().to_vec(), softmax_rows(xv.data(), c))?;
    Ok(x.tape().record("softmax", &[x], out, move |ctx| {
        let (s, g) = (ctx.output.data(), ctx.grad.data());
        let mut dx = Vec::with_capacity(s.len());
        for (sr, gr) in s.chunks(c).zip(g.chunks(c)) {
            let dot: T = sr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            dx.extend(sr.iter().zip(gr).map(|(&si, &gi)| si * (gi - dot)));
        }
        vec![Some(Tensor::new(ctx.output.shape().to_vec(), dx).unwrap())]
    }))
}

/// Plain softmax of a logits tensor, outside any tape.
pub fn softmax_tensor<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = check_logits("softmax", logits.shape())?;
    Tensor::new(logits.shape().to_vec(), softmax_rows(logits.data(), c))
}

/// Mean over the batch of `-sum_c target * log softmax(logits)`. Targets
/// are constants: each row must be a probability distribution.
pub fn cross_entropy_soft<'t, T: Real>(logits: Var<'t, T>, targets: &Tensor<T>) -> Result<Var<'t, T>> {
    let lv = logits.value();
    let (n, c) = check_logits("cross_entropy_soft", lv.shape())?;
    if targets.shape() != lv.shape() {
        return Err(Error::shape(
            "cross_entropy_soft",
            format!("logits {:?} vs targets {:?}", lv.shape(), targets.shape()),
        ));
    }
    for (i, row) in targets.data().chunks(c).enumerate() {
        let sum: f64 = row.iter().map(|v| v.to_f64().unwrap()).sum();
        if (sum - 1.0).abs() > 1e-5 || row.iter().any(|&v| v < T::zero() || !v.is_finite()) {
            return Err(Error::contract(
                "cross_entropy_soft",
                format!("target row {i} is not a distribution (sum {sum})"),
            ));
        }
    }
    let probs = softmax_rows(lv.data(), c);
    let mut loss = 0.0f64;
    for (lrow, trow) in lv.data().chunks(c).zip(targets.data().chunks(c)) {
        let m = lrow.iter().copied().fold(T::neg_infinity(), T::max).to_f64().unwrap();
        let lse = m + lrow.iter().map(|v| (v.to_f64().unwrap() - m).exp()).sum::<f64>().ln();
        for (&l, &t) in lrow.iter().zip(trow) {
            let t = t.to_f64().unwrap();
            if t > 0.0 {
                loss -= t * (l.to_f64().unwrap() - lse);
            }
        }
    }
    let out = Tensor::scalar(T::lit(loss / n as f64));
    let targets = targets.clone();
    Ok(logits.tape().record("cross_entropy_soft", &[logits], out, move |ctx| {
        let scale = ctx.grad.item() / T::from_usize(n).unwrap();
        let dx: Vec<T> = probs.iter().zip(targets.data()).map(|(&p, &t)| (p - t) * scale).collect();
        vec![Some(Tensor::new(vec![n, c], dx).unwrap())]
    }))
}

/// Fan-in Kaiming-uniform initializer: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn kaiming_uniform<T: Real>(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Convolution layer bound to a parameter store.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub geometry: ConvGeometry,
    weight: ParamId,
    bias: ParamId,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        geometry: ConvGeometry,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel.0 * kernel.1;
        let weight = store.param(
            &format!("{name}.weight"),
            kaiming_uniform(vec![out_channels, in_channels, kernel.0, kernel.1], fan_in, rng),
        );
        let bias = store.param(&format!("{name}.bias"), Tensor::zeros(vec![out_channels]));
        Conv2d { in_channels, out_channels, kernel, geometry, weight, bias }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.geometry)
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel.0 * self.kernel.1 + self.out_channels
    }

    pub fn param_ids(&self) -> (ParamId, ParamId) {
        (self.weight, self.bias)
    }

    pub fn output_extents(&self, t: usize, f: usize) -> Option<(usize, usize)> {
        let g = self.geometry;
        Some((
            conv_out_extent(t, self.kernel.0, g.stride.0, g.padding.0)?,
            conv_out_extent(f, self.kernel.1, g.stride.1, g.padding.1)?,
        ))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.param(
            &format!("{name}.weight"),
            kaiming_uniform(vec![out_dim, in_dim], in_dim, rng),
        );
        let bias = store.param(&format!("{name}.bias"), Tensor::zeros(vec![out_dim]));
        Linear { in_dim, out_dim, weight, bias }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        linear(x, p.var(self.weight), p.var(self.bias))
    }

    pub fn param_count(&self) -> usize {
        self.out_dim * self.in_dim + self.out_dim
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            gamma: store.param(&format!("{name}.gamma"), Tensor::ones(vec![channels])),
            beta: store.param(&format!("{name}.beta"), Tensor::zeros(vec![channels])),
            running_mean: store.buffer(&format!("{name}.running_mean"), Tensor::zeros(vec![channels])),
            running_var: store.buffer(&format!("{name}.running_var"), Tensor::ones(vec![channels])),
        }
    }

    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
        training: bool,
    ) -> Result<(Var<'t, T>, Option<BatchStats<T>>)> {
        let mode = if training {
            NormMode::Train
        } else {
            NormMode::Eval {
                running_mean: store.get(self.running_mean),
                running_var: store.get(self.running_var),
            }
        };
        batch_norm(x, p.var(self.gamma), p.var(self.beta), mode, self.eps)
    }

    /// Folds batch statistics into the running estimates:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update_running<T: Real>(&self, store: &mut ParamStore<T>, stats: &BatchStats<T>) {
        let m = T::lit(self.momentum);
        let keep = T::one() - m;
        for (id, batch) in [(self.running_mean, &stats.mean), (self.running_var, &stats.var)] {
            for (r, &b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
                *r = keep * *r + m * b;
            }
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// Builds a scratch tape with constants and evaluates `f`; for callers that
/// only want values.
pub fn eval<T: Real>(
    inputs: &[&Tensor<T>],
    f: impl for<'t> Fn(&[Var<'t, T>]) -> Result<Var<'t, T>>,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|&t| tape.constant(t.clone())).collect();
    Ok(f(&vars)?.value().as_ref().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, EPS_F64};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Six-loop direct convolution.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], g: ConvGeometry) -> Tensor<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let oh = (xs[2] + 2 * g.padding.0 - ws[2]) / g.stride.0 + 1;
        let ow = (xs[3] + 2 * g.padding.1 - ws[3]) / g.stride.1 + 1;
        let mut out = Tensor::zeros(vec![xs[0], ws[0], oh, ow]);
        let mut idx = 0;
        for n in 0..xs[0] {
            for k in 0..ws[0] {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[k];
                        for c in 0..xs[1] {
                            for i in 0..ws[2] {
                                for j in 0..ws[3] {
                                    let iy = (oy * g.stride.0 + i) as isize - g.padding.0 as isize;
                                    let ix = (ox * g.stride.1 + j) as isize - g.padding.1 as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < xs[2] && (ix as usize) < xs[3] {
                                        acc += x.at(&[n, c, iy as usize, ix as usize]) * w.at(&[k, c, i, j]);
                                    }
                                }
                            }
                        }
                        out.data_mut()[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::<f64>::randn(vec![1, 1, 4, 5], &mut rng(1));
        let w = Tensor::ones(vec![1, 1, 1, 1]);
        let y = eval(&[&x, &w], |v| conv2d(v[0], v[1], None, ConvGeometry::default())).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_all_ones_sum() {
        let x = Tensor::<f64>::ones(vec![1, 1, 3, 3]);
        let w = Tensor::ones(vec![1, 1, 3, 3]);
        let y = eval(&[&x, &w], |v| conv2d(v[0], v[1], None, ConvGeometry::default())).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn conv_matches_loop_oracle_strided() {
        let mut r = rng(2);
        let x = Tensor::<f64>::randn(vec![1, 2, 8, 8], &mut r);
        let w = Tensor::<f64>::randn(vec![3, 2, 3, 3], &mut r);
        let b = Tensor::<f64>::randn(vec![3], &mut r);
        for g in [
            ConvGeometry { stride: (2, 2), padding: (0, 0) },
            ConvGeometry { stride: (1, 2), padding: (1, 2) },
        ] {
            let y = eval(&[&x, &w, &b], |v| conv2d(v[0], v[1], Some(v[2]), g)).unwrap();
            let want = conv_oracle(&x, &w, b.data(), g);
            assert_eq!(y.shape(), want.shape());
            assert!(y.max_abs_diff(&want) < 1e-5);
        }
    }

    #[test]
    fn conv_degenerate_extent_names_axis() {
        let x = Tensor::<f32>::zeros(vec![1, 1, 2, 8]);
        let w = Tensor::<f32>::zeros(vec![1, 1, 3, 3]);
        let err = eval(&[&x, &w], |v| conv2d(v[0], v[1], None, ConvGeometry::default())).unwrap_err();
        assert!(err.to_string().contains("time"), "{err}");
        let x = Tensor::<f32>::zeros(vec![1, 2, 8, 8]);
        assert!(matches!(
            eval(&[&x, &w], |v| conv2d(v[0], v[1], None, ConvGeometry::default())),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn conv_gradients() {
        let mut r = rng(3);
        let x = Tensor::<f64>::randn(vec![2, 2, 5, 4], &mut r);
        let w = Tensor::<f64>::randn(vec![3, 2, 3, 2], &mut r);
        let b = Tensor::<f64>::randn(vec![3], &mut r);
        let proj = Tensor::<f64>::randn(vec![2, 3, 3, 3], &mut r);
        let g = ConvGeometry { stride: (2, 1), padding: (1, 0) };
        let err = check_gradients(
            |v| {
                let y = conv2d(v[0], v[1], Some(v[2]), g)?;
                Ok(y.mul(v[0].tape().constant(proj.clone()))?.sum_all())
            },
            &[x, w, b],
            EPS_F64,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn pool_extents() {
        assert_eq!(pool_out_extent(31, 2, 2, true), Some(16));
        assert_eq!(pool_out_extent(31, 2, 2, false), Some(15));
        assert_eq!(pool_out_extent(126, 2, 2, true), Some(63));
        assert_eq!(pool_out_extent(63, 2, 2, true), Some(32));
        assert_eq!(pool_out_extent(1, 2, 2, true), Some(1));
        assert_eq!(pool_out_extent(1, 2, 2, false), None);
    }

    #[test]
    fn pool_basic_and_overhang() {
        let x = Tensor::<f64>::from_f64(vec![1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = eval(&[&x], |v| maxpool2d(v[0], (2, 2), (2, 2), true)).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let x = Tensor::<f64>::from_f64(vec![1, 1, 1, 3], &[-1.0, -2.0, -3.0]).unwrap();
        let y = eval(&[&x], |v| maxpool2d(v[0], (2, 2), (2, 2), true)).unwrap();
        assert_eq!(y.data(), &[-1.0, -3.0]);
    }

    #[test]
    fn pool_gradient_routes_to_argmax_only() {
        let mut r = rng(4);
        let x = Tensor::<f64>::randn(vec![2, 3, 5, 7], &mut r);
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = maxpool2d(xv, (2, 2), (2, 2), true).unwrap();
        let outputs = y.value().numel();
        let g = tape.backward(y.sum_all()).unwrap();
        let gx = g.get(xv).unwrap();
        let nonzero = gx.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, outputs);
        assert!(gx.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn batchnorm_training_normalizes() {
        let mut r = rng(5);
        let x = Tensor::<f64>::randn(vec![4, 3, 5, 2], &mut r).map(|v| 3.0 * v + 7.0);
        let (gamma, beta) = (Tensor::ones(vec![3]), Tensor::zeros(vec![3]));
        let y = eval(&[&x, &gamma, &beta], |v| {
            Ok(batch_norm(v[0], v[1], v[2], NormMode::Train, BN_EPS)?.0)
        })
        .unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| (0..5).flat_map(move |t| (0..2).map(move |f| (n, t, f))))
                .map(|(n, t, f)| y.at(&[n, ch, t, f]))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-4, "{mean} {var}");
        }
    }

    #[test]
    fn batchnorm_zero_gamma_and_eval_constant() {
        let mut r = rng(6);
        let x = Tensor::<f64>::randn(vec![2, 2, 3, 3], &mut r);
        let gamma = Tensor::zeros(vec![2]);
        let beta = Tensor::from_f64(vec![2], &[0.5, -1.5]).unwrap();
        let y = eval(&[&x, &gamma, &beta], |v| {
            Ok(batch_norm(v[0], v[1], v[2], NormMode::Train, BN_EPS)?.0)
        })
        .unwrap();
        assert!(y.data().chunks(9).enumerate().all(|(i, c)| c.iter().all(|&v| v == [0.5, -1.5][i % 2])));

        let x = Tensor::<f64>::full(vec![1, 2, 2, 2], 4.0);
        let rm = Tensor::full(vec![2], 4.0);
        let rv = Tensor::ones(vec![2]);
        let gamma = Tensor::from_f64(vec![2], &[2.0, 3.0]).unwrap();
        let y = eval(&[&x, &gamma, &beta], |v| {
            Ok(batch_norm(v[0], v[1], v[2], NormMode::Eval { running_mean: &rm, running_var: &rv }, BN_EPS)?.0)
        })
        .unwrap();
        assert!(y.data().chunks(4).enumerate().all(|(i, c)| c.iter().all(|&v| v == [0.5, -1.5][i])));
    }

    #[test]
    fn batchnorm_rejects_single_value_batch() {
        let x = Tensor::<f64>::ones(vec![1, 2, 1, 1]);
        let (gamma, beta) = (Tensor::ones(vec![2]), Tensor::zeros(vec![2]));
        let r = eval(&[&x, &gamma, &beta], |v| Ok(batch_norm(v[0], v[1], v[2], NormMode::Train, BN_EPS)?.0));
        assert!(matches!(r, Err(Error::Contract { .. })));
    }

    #[test]
    fn batchnorm_gradients_both_modes() {
        let mut r = rng(7);
        let x = Tensor::<f64>::randn(vec![3, 2, 2, 3], &mut r);
        let gamma = Tensor::<f64>::uniform(vec![2], 0.5, 1.5, &mut r);
        let beta = Tensor::<f64>::randn(vec![2], &mut r);
        let proj = Tensor::<f64>::randn(vec![3, 2, 2, 3], &mut r);
        let rm = Tensor::<f64>::randn(vec![2], &mut r);
        let rv = Tensor::<f64>::uniform(vec![2], 0.5, 2.0, &mut r);
        for training in [true, false] {
            let err = check_gradients(
                |v| {
                    let mode = if training {
                        NormMode::Train
                    } else {
                        NormMode::Eval { running_mean: &rm, running_var: &rv }
                    };
                    let (y, _) = batch_norm(v[0], v[1], v[2], mode, BN_EPS)?;
                    Ok(y.mul(v[0].tape().constant(proj.clone()))?.sum_all())
                },
                &[x.clone(), gamma.clone(), beta.clone()],
                EPS_F64,
            )
            .unwrap();
            assert!(err < 1e-6, "training={training}: {err}");
        }
    }

    #[test]
    fn running_stats_update() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 1);
        let stats = BatchStats { mean: vec![2.0], var: vec![3.0] };
        bn.update_running(&mut store, &stats);
        assert!((store.get(store.find("bn.running_mean").unwrap()).item() - 0.2).abs() < 1e-12);
        assert!((store.get(store.find("bn.running_var").unwrap()).item() - 1.2).abs() < 1e-12);
    }

    #[test]
    fn linear_examples() {
        let mut r = rng(8);
        let x = Tensor::<f64>::randn(vec![3, 4], &mut r);
        let eye = Tensor::from_fn(vec![4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
        let zero_b = Tensor::zeros(vec![4]);
        assert_eq!(eval(&[&x, &eye, &zero_b], |v| linear(v[0], v[1], v[2])).unwrap(), x);
        let zw = Tensor::zeros(vec![2, 4]);
        let b = Tensor::from_f64(vec![2], &[1.0, -2.0]).unwrap();
        let y = eval(&[&x, &zw, &b], |v| linear(v[0], v[1], v[2])).unwrap();
        assert!(y.data().chunks(2).all(|r| r == [1.0, -2.0]));
        let w = Tensor::<f64>::randn(vec![2, 4], &mut r);
        let y = eval(&[&x, &w, &b], |v| linear(v[0], v[1], v[2])).unwrap();
        for n in 0..3 {
            for o in 0..2 {
                let want: f64 = b.data()[o] + (0..4).map(|d| x.at(&[n, d]) * w.at(&[o, d])).sum::<f64>();
                assert!((y.at(&[n, o]) - want).abs() < 1e-12);
            }
        }
        let bad = Tensor::<f64>::zeros(vec![2, 3]);
        assert!(eval(&[&x, &bad, &b], |v| linear(v[0], v[1], v[2])).is_err());
    }

    #[test]
    fn linear_gradients() {
        let mut r = rng(9);
        let inputs = [
            Tensor::<f64>::randn(vec![3, 5], &mut r),
            Tensor::<f64>::randn(vec![4, 5], &mut r),
            Tensor::<f64>::randn(vec![4], &mut r),
        ];
        let proj = Tensor::<f64>::randn(vec![3, 4], &mut r);
        let err = check_gradients(
            |v| Ok(linear(v[0], v[1], v[2])?.mul(v[0].tape().constant(proj.clone()))?.sum_all()),
            &inputs,
            EPS_F64,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn mfm_examples() {
        let x = Tensor::<f64>::from_f64(vec![1, 4, 1, 1], &[3.0, -5.0, -2.0, -1.0]).unwrap();
        let y = eval(&[&x], |v| mfm(v[0])).unwrap();
        assert_eq!(y.shape(), &[1, 2, 1, 1]);
        assert_eq!(y.data(), &[3.0, -1.0]);

        let half = Tensor::<f64>::randn(vec![2, 3, 2, 2], &mut rng(10));
        let x = Tensor::concat(&[&half, &half], 1).unwrap();
        assert_eq!(eval(&[&x], |v| mfm(v[0])).unwrap(), half);

        let x = Tensor::<f32>::zeros(vec![1, 64, 4, 4]);
        assert_eq!(eval(&[&x], |v| mfm(v[0])).unwrap().shape(), &[1, 32, 4, 4]);
        let x = Tensor::<f32>::zeros(vec![2, 160]);
        assert_eq!(eval(&[&x], |v| mfm(v[0])).unwrap().shape(), &[2, 80]);

        let odd = Tensor::<f32>::zeros(vec![1, 3, 2, 2]);
        assert!(matches!(eval(&[&odd], |v| mfm(v[0])), Err(Error::Contract { .. })));
    }

    #[test]
    fn mfm_tie_gradient_to_first_half() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(vec![1, 2], &[1.0, 1.0]).unwrap());
        let g = tape.backward(mfm(x).unwrap().sum_all()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::<f64>::from_f64(vec![1, 2], &[0.0, 0.0]).unwrap();
        assert_eq!(softmax_tensor(&x).unwrap().data(), &[0.5, 0.5]);
        let x = Tensor::<f64>::from_f64(vec![1, 2], &[1000.0, 0.0]).unwrap();
        let s = softmax_tensor(&x).unwrap();
        assert!(s.all_finite() && s.data()[0] == 1.0 && s.data()[1] < 1e-300);
        let mut r = rng(11);
        let x = Tensor::<f64>::randn(vec![3, 5], &mut r);
        let shifted = x.map(|v| v + 17.5);
        let (a, b) = (softmax_tensor(&x).unwrap(), softmax_tensor(&shifted).unwrap());
        assert!(a.max_abs_diff(&b) < 1e-6);
        for row in a.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    fn one_hot(classes: usize, idx: usize) -> Vec<f64> {
        (0..classes).map(|c| if c == idx { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn cross_entropy_examples() {
        let mut logits = vec![0.0; 10];
        logits[3] = 50.0;
        let l = Tensor::<f64>::from_f64(vec![1, 10], &logits).unwrap();
        let t = Tensor::from_f64(vec![1, 10], &one_hot(10, 3)).unwrap();
        let loss = eval(&[&l], |v| cross_entropy_soft(v[0], &t)).unwrap().item();
        assert!(loss < 1e-12);

        let uniform = Tensor::<f64>::zeros(vec![1, 10]);
        let mut soft = vec![0.05; 10];
        soft[0] = 0.55;
        let t = Tensor::from_f64(vec![1, 10], &soft).unwrap();
        let loss = eval(&[&uniform], |v| cross_entropy_soft(v[0], &t)).unwrap().item();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_linear_in_target() {
        let mut r = rng(12);
        let l = Tensor::<f64>::randn(vec![1, 10], &mut r);
        let ti = Tensor::from_f64(vec![1, 10], &one_hot(10, 2)).unwrap();
        let tj = Tensor::from_f64(vec![1, 10], &one_hot(10, 7)).unwrap();
        let mixed = ti.zip_map(&tj, |a, b| 0.5 * a + 0.5 * b);
        let ce = |t: &Tensor<f64>| eval(&[&l], |v| cross_entropy_soft(v[0], t)).unwrap().item();
        assert!((ce(&mixed) - (0.5 * ce(&ti) + 0.5 * ce(&tj))).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_targets() {
        let l = Tensor::<f64>::zeros(vec![1, 3]);
        for bad in [[0.5, 0.4, 0.0], [1.2, -0.2, 0.0]] {
            let t = Tensor::from_f64(vec![1, 3], &bad).unwrap();
            assert!(matches!(eval(&[&l], |v| cross_entropy_soft(v[0], &t)), Err(Error::Contract { .. })));
        }
    }

    #[test]
    fn softmax_and_cross_entropy_gradients() {
        let mut r = rng(13);
        let x = Tensor::<f64>::randn(vec![3, 4], &mut r);
        let proj = Tensor::<f64>::randn(vec![3, 4], &mut r);
        let err = check_gradients(
            |v| Ok(softmax(v[0])?.mul(v[0].tape().constant(proj.clone()))?.sum_all()),
            &[x.clone()],
            EPS_F64,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let t = Tensor::<f64>::uniform(vec![3, 4], 0.1, 1.0, &mut r);
        let t = Tensor::from_fn(vec![3, 4], |i| t.data()[i] / t.data()[i / 4 * 4..i / 4 * 4 + 4].iter().sum::<f64>());
        let err = check_gradients(|v| cross_entropy_soft(v[0], &t), &[x], EPS_F64).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
