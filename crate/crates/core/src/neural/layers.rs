//! Layer kernels with analytic backward passes.
//!
//! Convolutions are lowered to GEMM through an im2col buffer built over a
//! chunk of samples at a time; the chunk size depends only on the layer
//! geometry, so reduction order never depends on the thread count.

use std::any::Any;
use std::cell::RefCell;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{arg_err, Result};
use crate::scalar::{gemm, Layout, Scalar};

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Upper bound on im2col buffer elements per chunk.
const COL_BUDGET: usize = 1 << 22;

thread_local! {
    static SCRATCH: RefCell<Vec<Box<dyn Any>>> = const { RefCell::new(Vec::new()) };
}

/// Borrows a reusable per-thread buffer of at least `len` elements.
/// Contents are unspecified on entry.
fn take_scratch<T: Scalar>(len: usize) -> Vec<T> {
    let found = SCRATCH.with(|s| {
        let mut pool = s.borrow_mut();
        let i = pool.iter().position(|b| b.is::<Vec<T>>())?;
        Some(*pool.swap_remove(i).downcast::<Vec<T>>().expect("checked type"))
    });
    let mut v = found.unwrap_or_default();
    if v.len() < len {
        v.resize(len, T::zero());
    }
    v
}

fn give_scratch<T: Scalar>(v: Vec<T>) {
    SCRATCH.with(|s| s.borrow_mut().push(Box::new(v)));
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(input: &[usize], weight: &[usize], pad: usize) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return arg_err("conv2d expects 4-d input and weight");
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (oc, wc, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if wc != c {
            return arg_err(format!("conv2d: input has {c} channels, weight expects {wc}"));
        }
        if kh == 0 || kw == 0 {
            return arg_err("conv2d: kernel must be at least 1x1");
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return arg_err(format!("conv2d: {h}x{w} input with pad {pad} smaller than {kh}x{kw} kernel"));
        }
        let oh = h + 2 * pad - kh + 1;
        let ow = w + 2 * pad - kw + 1;
        Ok(ConvGeom { n, c, h, w, oc, kh, kw, pad, oh, ow })
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn ohw(&self) -> usize {
        self.oh * self.ow
    }

    fn chunk(&self) -> usize {
        (COL_BUDGET / (self.ckk() * self.ohw()).max(1)).clamp(1, self.n.max(1))
    }

    /// Valid output-column range for kernel column `k` (and likewise rows).
    fn valid_range(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(k).min(out_len);
        let hi = (in_len + self.pad).saturating_sub(k).min(out_len).max(lo);
        (lo, hi)
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, b0: usize, nb: usize, col: &mut [T]) {
    let ohw = g.ohw();
    let ncols = nb * ohw;
    let plane = g.h * g.w;
    for ci in 0..g.c {
        for ki in 0..g.kh {
            let (ylo, yhi) = g.valid_range(ki, g.h, g.oh);
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let row = &mut col[r * ncols..(r + 1) * ncols];
                let (xlo, xhi) = g.valid_range(kj, g.w, g.ow);
                for bi in 0..nb {
                    let img = &x[((b0 + bi) * g.c + ci) * plane..][..plane];
                    let dst = &mut row[bi * ohw..(bi + 1) * ohw];
                    for oy in 0..g.oh {
                        let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        if oy < ylo || oy >= yhi {
                            drow.fill(T::zero());
                            continue;
                        }
                        let iy = oy + ki - g.pad;
                        let src = &img[iy * g.w + xlo + kj - g.pad..iy * g.w + xhi + kj - g.pad];
                        if g.ow <= 16 {
                            // Narrow rows: element loop beats per-row memcpy calls.
                            for v in &mut drow[..xlo] {
                                *v = T::zero();
                            }
                            for (d, s) in drow[xlo..xhi].iter_mut().zip(src) {
                                *d = *s;
                            }
                            for v in &mut drow[xhi..] {
                                *v = T::zero();
                            }
                        } else {
                            drow[..xlo].fill(T::zero());
                            drow[xlo..xhi].copy_from_slice(src);
                            drow[xhi..].fill(T::zero());
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeom, b0: usize, nb: usize, x: &mut [T]) {
    let ohw = g.ohw();
    let ncols = nb * ohw;
    let plane = g.h * g.w;
    for ci in 0..g.c {
        for ki in 0..g.kh {
            let (ylo, yhi) = g.valid_range(ki, g.h, g.oh);
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let row = &col[r * ncols..(r + 1) * ncols];
                let (xlo, xhi) = g.valid_range(kj, g.w, g.ow);
                for bi in 0..nb {
                    let img = &mut x[((b0 + bi) * g.c + ci) * plane..][..plane];
                    let src = &row[bi * ohw..(bi + 1) * ohw];
                    for oy in ylo..yhi {
                        let iy = oy + ki - g.pad;
                        let dst = &mut img[iy * g.w + xlo + kj - g.pad..iy * g.w + xhi + kj - g.pad];
                        for (d, s) in dst.iter_mut().zip(&src[oy * g.ow + xlo..oy * g.ow + xhi]) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 cross-correlation (no kernel flip) with zero padding, plus bias.
///
/// `input` is `(n, c, h, w)`, `weight` is `(oc, c, kh, kw)`.
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &[T], pad: usize) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.dims(), weight.dims(), pad)?;
    if bias.len() != g.oc {
        return arg_err("conv2d: bias length does not match output channels");
    }
    let (ckk, ohw) = (g.ckk(), g.ohw());
    let mut out = Tensor::zeros(&[g.n, g.oc, g.oh, g.ow]);
    let chunk = g.chunk();
    let mut col = take_scratch::<T>(ckk * chunk * ohw);
    let mut tmp = take_scratch::<T>(g.oc * chunk * ohw);
    let x = input.data();
    let w = weight.data();
    let o = out.data_mut();
    let mut b0 = 0;
    while b0 < g.n {
        let nb = chunk.min(g.n - b0);
        let ncols = nb * ohw;
        im2col(x, &g, b0, nb, &mut col[..ckk * ncols]);
        gemm(g.oc, ckk, ncols, T::one(), w, Layout::Normal, &col[..ckk * ncols], Layout::Normal, T::zero(), &mut tmp[..g.oc * ncols]);
        for bi in 0..nb {
            for oc in 0..g.oc {
                let src = &tmp[oc * ncols + bi * ohw..oc * ncols + (bi + 1) * ohw];
                let dst = &mut o[((b0 + bi) * g.oc + oc) * ohw..][..ohw];
                let b = bias[oc];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *s + b;
                }
            }
        }
        b0 += nb;
    }
    give_scratch(col);
    give_scratch(tmp);
    Ok(out)
}

/// Accumulates convolution gradients into the provided buffers.
///
/// `grad_weight += dL/dW`, `grad_bias += dL/db`, and, when given,
/// `grad_input += dL/dx`.
pub fn conv2d_backward_into<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    pad: usize,
    grad_out: &Tensor<T>,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    mut grad_input: Option<&mut [T]>,
) -> Result<()> {
    let g = ConvGeom::new(input.dims(), weight.dims(), pad)?;
    if grad_out.dims() != [g.n, g.oc, g.oh, g.ow] {
        return arg_err("conv2d backward: gradient shape does not match forward output");
    }
    if grad_weight.len() != weight.len() || grad_bias.len() != g.oc {
        return arg_err("conv2d backward: parameter gradient buffers have the wrong size");
    }
    if let Some(gi) = grad_input.as_deref() {
        if gi.len() != input.len() {
            return arg_err("conv2d backward: input gradient buffer has the wrong size");
        }
    }
    let (ckk, ohw) = (g.ckk(), g.ohw());
    let chunk = g.chunk();
    let mut col = take_scratch::<T>(ckk * chunk * ohw);
    let mut tmp = take_scratch::<T>(g.oc * chunk * ohw);
    let x = input.data();
    let w = weight.data();
    let dy = grad_out.data();
    let mut b0 = 0;
    while b0 < g.n {
        let nb = chunk.min(g.n - b0);
        let ncols = nb * ohw;
        for bi in 0..nb {
            for oc in 0..g.oc {
                let src = &dy[((b0 + bi) * g.oc + oc) * ohw..][..ohw];
                tmp[oc * ncols + bi * ohw..oc * ncols + (bi + 1) * ohw].copy_from_slice(src);
            }
        }
        let dtmp = &tmp[..g.oc * ncols];
        for (oc, gb) in grad_bias.iter_mut().enumerate() {
            *gb += dtmp[oc * ncols..(oc + 1) * ncols].iter().copied().sum::<T>();
        }
        im2col(x, &g, b0, nb, &mut col[..ckk * ncols]);
        gemm(g.oc, ncols, ckk, T::one(), dtmp, Layout::Normal, &col[..ckk * ncols], Layout::Transposed, T::one(), grad_weight);
        if let Some(gi) = grad_input.as_deref_mut() {
            gemm(ckk, g.oc, ncols, T::one(), w, Layout::Transposed, dtmp, Layout::Normal, T::zero(), &mut col[..ckk * ncols]);
            col2im_add(&col[..ckk * ncols], &g, b0, nb, gi);
        }
        b0 += nb;
    }
    give_scratch(col);
    give_scratch(tmp);
    Ok(())
}

/// Gradients of a convolution.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, pad: usize, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
    let mut gw = Tensor::zeros(weight.dims());
    let mut gb = vec![T::zero(); weight.dims().first().copied().unwrap_or(0)];
    let mut gi = Tensor::zeros(input.dims());
    conv2d_backward_into(input, weight, pad, grad_out, gw.data_mut(), &mut gb, Some(gi.data_mut()))?;
    Ok(ConvGrads { input: gi, weight: gw, bias: gb })
}

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let data = input.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    Tensor::from_vec(input.dims(), data).expect("same shape")
}

/// Masks by `input > 0`; the derivative at zero is taken as zero.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.dims(), data).expect("same shape")
}

/// 2×2 stride-2 max pooling. Returns the output and, per output element,
/// the flat input index of its maximum (first in row-major order on ties).
pub fn maxpool2_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    if input.dims().len() != 4 {
        return arg_err("maxpool2 expects a 4-d input");
    }
    let (n, c, h, w) = input.nchw();
    if h % 2 != 0 || w % 2 != 0 {
        return arg_err(format!("maxpool2 needs even spatial dims, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut arg = vec![0usize; n * c * oh * ow];
    let rows = out.chunks_exact_mut(ow).zip(arg.chunks_exact_mut(ow));
    for (r, (orow, arow)) in rows.enumerate() {
        let top = (r / oh) * h * w + (r % oh) * 2 * w;
        let upper = &x[top..top + w];
        let lower = &x[top + w..top + 2 * w];
        for ox in 0..ow {
            let j = 2 * ox;
            let (mut best, mut v) = (top + j, upper[j]);
            if upper[j + 1] > v {
                best = top + j + 1;
                v = upper[j + 1];
            }
            if lower[j] > v {
                best = top + w + j;
                v = lower[j];
            }
            if lower[j + 1] > v {
                best = top + w + j + 1;
                v = lower[j + 1];
            }
            orow[ox] = v;
            arow[ox] = best;
        }
    }
    Ok((Tensor::from_vec(&[n, c, oh, ow], out)?, arg))
}

pub fn maxpool2_backward<T: Scalar>(input_dims: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut gi = Tensor::zeros(input_dims);
    let g = gi.data_mut();
    for (&idx, &d) in argmax.iter().zip(grad_out.data()) {
        g[idx] += d;
    }
    gi
}

fn fc_geom<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let b = input.batch();
    let d = input.sample_len();
    if weight.dims().len() != 2 || weight.dims()[1] != d {
        return arg_err(format!(
            "fully_connected: weight {:?} does not accept {d} inputs",
            weight.dims()
        ));
    }
    Ok((b, d, weight.dims()[0]))
}

/// Affine map of the flattened sample; weight is `(out, in)`, output
/// `(batch, out, 1, 1)`.
pub fn fully_connected_forward<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let (b, d, o) = fc_geom(input, weight)?;
    if bias.len() != o {
        return arg_err("fully_connected: bias length mismatch");
    }
    let mut out = vec![T::zero(); b * o];
    for row in out.chunks_exact_mut(o) {
        row.copy_from_slice(bias);
    }
    gemm(b, d, o, T::one(), input.data(), Layout::Normal, weight.data(), Layout::Transposed, T::one(), &mut out);
    Tensor::from_vec(&[b, o, 1, 1], out)
}

pub fn fully_connected_backward_into<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    grad_input: Option<&mut [T]>,
) -> Result<()> {
    let (b, d, o) = fc_geom(input, weight)?;
    if grad_out.len() != b * o || grad_weight.len() != o * d || grad_bias.len() != o {
        return arg_err("fully_connected backward: buffer size mismatch");
    }
    let dy = grad_out.data();
    gemm(o, b, d, T::one(), dy, Layout::Transposed, input.data(), Layout::Normal, T::one(), grad_weight);
    for row in dy.chunks_exact(o) {
        for (gb, g) in grad_bias.iter_mut().zip(row) {
            *gb += *g;
        }
    }
    if let Some(gi) = grad_input {
        if gi.len() != b * d {
            return arg_err("fully_connected backward: input gradient size mismatch");
        }
        gemm(b, o, d, T::one(), dy, Layout::Normal, weight.data(), Layout::Normal, T::one(), gi);
    }
    Ok(())
}

/// Inverted dropout. In training mode each unit is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 − rate)`; evaluation mode is
/// the identity. Returns the per-unit multiplier used (for backward).
pub fn dropout_forward<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return arg_err(format!("dropout rate {rate} outside [0, 1)"));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..input.len())
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let data = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    Ok((Tensor::from_vec(input.dims(), data)?, Some(mask)))
}

pub fn dropout_backward<T: Scalar>(mask: Option<&[T]>, grad_out: &Tensor<T>) -> Tensor<T> {
    match mask {
        None => grad_out.clone(),
        Some(m) => {
            let data = grad_out.data().iter().zip(m).map(|(&g, &k)| g * k).collect();
            Tensor::from_vec(grad_out.dims(), data).expect("same shape")
        }
    }
}

/// Softmax over the channel axis at every `(sample, row, col)`.
pub fn softmax_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = input.nchw();
    let hw = h * w;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for p in 0..hw {
            let at = |k: usize| (b * c + k) * hw + p;
            let max = (0..c).map(|k| x[at(k)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for k in 0..c {
                let e = (x[at(k)] - max).exp();
                out[at(k)] = e;
                sum += e;
            }
            for k in 0..c {
                out[at(k)] /= sum;
            }
        }
    }
    Tensor::from_vec(input.dims(), out).expect("same shape")
}

/// Vector-Jacobian product of the softmax given its output.
pub fn softmax_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = output.nchw();
    let hw = h * w;
    let y = output.data();
    let dy = grad_out.data();
    let mut dx = vec![T::zero(); y.len()];
    for b in 0..n {
        for p in 0..hw {
            let at = |k: usize| (b * c + k) * hw + p;
            let dot: T = (0..c).map(|k| y[at(k)] * dy[at(k)]).sum();
            for k in 0..c {
                dx[at(k)] = y[at(k)] * (dy[at(k)] - dot);
            }
        }
    }
    Tensor::from_vec(output.dims(), dx).expect("same shape")
}
