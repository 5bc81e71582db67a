//! NHWC tensors and the differentiable primitives the networks are built
//! from: zero-padded dilated convolution, ReLU, nearest-neighbour
//! upsampling and channel concatenation.
//!
//! Every primitive comes with an explicit backward pass. Accumulation
//! order inside each output element is fixed (tap-major, then input
//! channel), and parallelism only ever splits *disjoint* output rows, so
//! results are bitwise deterministic for a given input regardless of
//! thread count.

use rayon::prelude::*;

use crate::{Error, Result};

/// Floating-point element type for all numerical kernels.
///
/// The two implementations are `f32` (production) and `f64` (gradient
/// checks and ERF analysis run the same code paths at higher precision).
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

// ---------------------------------------------------------------------------
// Tensor4
// ---------------------------------------------------------------------------

/// Dense rank-4 tensor in NHWC layout: `(batch, height, width, channels)`,
/// channels fastest-varying. All dimensions must be at least 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<S> {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor4<S> {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Result<Self> {
        Self::filled(n, h, w, c, S::zero())
    }

    pub fn filled(n: usize, h: usize, w: usize, c: usize, v: S) -> Result<Self> {
        let len = checked_len(&[n, h, w, c])?;
        Ok(Tensor4 {
            n,
            h,
            w,
            c,
            data: vec![v; len],
        })
    }

    /// Builds a tensor from a flat NHWC buffer; `data.len()` must equal
    /// `n*h*w*c`.
    pub fn from_vec(n: usize, h: usize, w: usize, c: usize, data: Vec<S>) -> Result<Self> {
        let len = checked_len(&[n, h, w, c])?;
        if data.len() != len {
            return Err(Error::shape(format!(
                "buffer of {} elements cannot view as ({n},{h},{w},{c})",
                data.len()
            )));
        }
        Ok(Tensor4 { n, h, w, c, data })
    }

    pub fn from_fn(
        n: usize,
        h: usize,
        w: usize,
        c: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> S,
    ) -> Result<Self> {
        let mut t = Self::zeros(n, h, w, c)?;
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    for k in 0..c {
                        let idx = t.idx(b, i, j, k);
                        t.data[idx] = f(b, i, j, k);
                    }
                }
            }
        }
        Ok(t)
    }

    /// `(n, h, w, c)`.
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.h, self.w, self.c)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, b: usize, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(b < self.n && i < self.h && j < self.w && k < self.c);
        ((b * self.h + i) * self.w + j) * self.c + k
    }

    #[inline]
    pub fn at(&self, b: usize, i: usize, j: usize, k: usize) -> S {
        self.data[self.idx(b, i, j, k)]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, i: usize, j: usize, k: usize) -> &mut S {
        let idx = self.idx(b, i, j, k);
        &mut self.data[idx]
    }

    /// The `c` channel values at one pixel.
    #[inline]
    pub fn pixel(&self, b: usize, i: usize, j: usize) -> &[S] {
        let base = self.idx(b, i, j, 0);
        &self.data[base..base + self.c]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    /// Elementwise conversion to another scalar type (via f64).
    pub fn cast<T: Scalar>(&self) -> Tensor4<T> {
        Tensor4 {
            n: self.n,
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|v| T::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }
}

fn checked_len(dims: &[usize]) -> Result<usize> {
    let mut len = 1usize;
    for &d in dims {
        if d == 0 {
            return Err(Error::shape("tensor dimensions must all be >= 1"));
        }
        len = len
            .checked_mul(d)
            .ok_or_else(|| Error::shape("tensor dimensions overflow"))?;
    }
    Ok(len)
}

// ---------------------------------------------------------------------------
// ConvKernel
// ---------------------------------------------------------------------------

/// Parameters and geometry of one dilated convolution layer.
///
/// Weights are stored flat in `(kh, kw, c_in, c_out)` order with `c_out`
/// fastest-varying; `bias` has one entry per output channel. Kernel sides
/// must be odd so taps are centered on the output pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<S> {
    pub kh: usize,
    pub kw: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub weights: Vec<S>,
    pub bias: Vec<S>,
    /// `(dy, dx)`, both >= 1.
    pub dilation: (usize, usize),
    /// `(sy, sx)`, both >= 1.
    pub stride: (usize, usize),
}

impl<S: Scalar> ConvKernel<S> {
    pub fn zeros(
        kh: usize,
        kw: usize,
        c_in: usize,
        c_out: usize,
        dilation: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Self> {
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(format!(
                "kernel sides must be odd, got {kh}x{kw}"
            )));
        }
        if dilation.0 == 0 || dilation.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::shape("dilation and stride must be >= 1"));
        }
        let len = checked_len(&[kh, kw, c_in, c_out])?;
        Ok(ConvKernel {
            kh,
            kw,
            c_in,
            c_out,
            weights: vec![S::zero(); len],
            bias: vec![S::zero(); c_out],
            dilation,
            stride,
        })
    }

    #[inline]
    pub fn widx(&self, p: usize, q: usize, k: usize, o: usize) -> usize {
        debug_assert!(p < self.kh && q < self.kw && k < self.c_in && o < self.c_out);
        ((p * self.kw + q) * self.c_in + k) * self.c_out + o
    }

    pub fn param_count(&self) -> u64 {
        (self.weights.len() + self.bias.len()) as u64
    }

    /// Output spatial dims for an input of `(h, w)`: ceil division by
    /// stride (zero padding keeps "same" extent at stride 1).
    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + self.stride.0 - 1) / self.stride.0,
            (w + self.stride.1 - 1) / self.stride.1,
        )
    }
}

/// Gradients produced by [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct ConvGrads<S> {
    pub input: Tensor4<S>,
    /// Same layout/length as `ConvKernel::weights`.
    pub weights: Vec<S>,
    /// One entry per output channel.
    pub bias: Vec<S>,
}

/// Range of output coordinates `o` in `[0, out_lim)` for which
/// `o * stride + off` lands inside `[0, lim)`.
#[inline]
fn valid_out_range(off: i64, stride: i64, lim: i64, out_lim: i64) -> (usize, usize) {
    let lo = (-off).div_euclid(stride) + if (-off).rem_euclid(stride) != 0 { 1 } else { 0 };
    let lo = lo.max(0);
    let hi = (lim - 1 - off).div_euclid(stride) + 1;
    let hi = hi.clamp(0, out_lim);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

fn check_conv_shapes<S: Scalar>(input: &Tensor4<S>, kernel: &ConvKernel<S>) -> Result<()> {
    if input.c != kernel.c_in {
        return Err(Error::shape(format!(
            "conv expects {} input channels, tensor has {}",
            kernel.c_in, input.c
        )));
    }
    let wlen = kernel.kh * kernel.kw * kernel.c_in * kernel.c_out;
    if kernel.weights.len() != wlen || kernel.bias.len() != kernel.c_out {
        return Err(Error::shape("kernel buffer lengths disagree with its dims"));
    }
    if kernel.kh % 2 == 0 || kernel.kw % 2 == 0 {
        return Err(Error::shape("kernel sides must be odd"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// conv2d forward
// ---------------------------------------------------------------------------

/// Zero-padded "same" dilated convolution with centered taps:
///
/// ```text
/// out(b,i,j,o) = bias(o) + sum_{p,q,k} in(b, i*sy + (p-kh/2)*dy,
///                                           j*sx + (q-kw/2)*dx, k) * w(p,q,k,o)
/// ```
///
/// Reads outside the frame contribute zero; output spatial dims are
/// `ceil(h/sy) x ceil(w/sx)`.
pub fn conv2d<S: Scalar>(input: &Tensor4<S>, kernel: &ConvKernel<S>) -> Result<Tensor4<S>> {
    check_conv_shapes(input, kernel)?;
    let (n, h, w, cin) = input.shape();
    let (oh, ow) = kernel.output_dims(h, w);
    let cout = kernel.c_out;
    let (dy, dx) = (kernel.dilation.0 as i64, kernel.dilation.1 as i64);
    let (sy, sx) = (kernel.stride.0 as i64, kernel.stride.1 as i64);
    let (chy, chx) = ((kernel.kh / 2) as i64, (kernel.kw / 2) as i64);

    let mut out = Tensor4::zeros(n, oh, ow, cout)?;
    let in_data = input.data();
    let weights = &kernel.weights;
    let bias = &kernel.bias;

    out.data
        .par_chunks_mut(ow * cout)
        .enumerate()
        .for_each(|(row_id, out_row)| {
            let b = row_id / oh;
            let oi = row_id % oh;
            for oj in 0..ow {
                out_row[oj * cout..(oj + 1) * cout].copy_from_slice(bias);
            }
            for p in 0..kernel.kh {
                let iy = oi as i64 * sy + (p as i64 - chy) * dy;
                if iy < 0 || iy >= h as i64 {
                    continue;
                }
                let in_row = &in_data[((b * h + iy as usize) * w) * cin..][..w * cin];
                for q in 0..kernel.kw {
                    let qoff = (q as i64 - chx) * dx;
                    let (lo, hi) = valid_out_range(qoff, sx, w as i64, ow as i64);
                    let wtap = &weights[(p * kernel.kw + q) * cin * cout..][..cin * cout];
                    for oj in lo..hi {
                        let ix = (oj as i64 * sx + qoff) as usize;
                        let x = &in_row[ix * cin..][..cin];
                        let orow = &mut out_row[oj * cout..][..cout];
                        for (k, &xv) in x.iter().enumerate() {
                            let wk = &wtap[k * cout..][..cout];
                            for (acc, &wv) in orow.iter_mut().zip(wk) {
                                *acc += xv * wv;
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

// ---------------------------------------------------------------------------
// conv2d backward
// ---------------------------------------------------------------------------

/// Reverse-mode gradients of [`conv2d`] with respect to the input, the
/// weights and the bias, given `d loss / d output`.
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor4<S>,
    kernel: &ConvKernel<S>,
    grad_out: &Tensor4<S>,
) -> Result<ConvGrads<S>> {
    check_conv_shapes(input, kernel)?;
    let (n, h, w, cin) = input.shape();
    let (oh, ow) = kernel.output_dims(h, w);
    let cout = kernel.c_out;
    if grad_out.shape() != (n, oh, ow, cout) {
        return Err(Error::shape(format!(
            "grad_out shape {:?} does not match conv output ({n},{oh},{ow},{cout})",
            grad_out.shape()
        )));
    }
    let (kh, kw) = (kernel.kh, kernel.kw);
    let (dy, dx) = (kernel.dilation.0 as i64, kernel.dilation.1 as i64);
    let (sy, sx) = (kernel.stride.0 as i64, kernel.stride.1 as i64);
    let (chy, chx) = ((kh / 2) as i64, (kw / 2) as i64);
    let go = grad_out.data();

    // Transposed weight copy (p,q,o,k) so the grad-input inner loop runs
    // contiguously over input channels.
    let mut wt = vec![S::zero(); kernel.weights.len()];
    for p in 0..kh {
        for q in 0..kw {
            let tap = (p * kw + q) * cin * cout;
            for k in 0..cin {
                for o in 0..cout {
                    wt[tap + o * cin + k] = kernel.weights[tap + k * cout + o];
                }
            }
        }
    }

    // --- grad input: gather over the taps that read each input pixel.
    let mut grad_in = Tensor4::zeros(n, h, w, cin)?;
    grad_in
        .data
        .par_chunks_mut(w * cin)
        .enumerate()
        .for_each(|(row_id, gi_row)| {
            let b = row_id / h;
            let iy = row_id as i64 % h as i64;
            for p in 0..kh {
                // need oi with oi*sy + (p-chy)*dy == iy
                let poff = (p as i64 - chy) * dy;
                let num = iy - poff;
                if num < 0 || num % sy != 0 {
                    continue;
                }
                let oi = num / sy;
                if oi >= oh as i64 {
                    continue;
                }
                let go_row = &go[((b * oh + oi as usize) * ow) * cout..][..ow * cout];
                for q in 0..kw {
                    let qoff = (q as i64 - chx) * dx;
                    let (lo, hi) = valid_out_range(qoff, sx, w as i64, ow as i64);
                    let wtap = &wt[(p * kw + q) * cin * cout..][..cin * cout];
                    for oj in lo..hi {
                        let ix = (oj as i64 * sx + qoff) as usize;
                        let g = &go_row[oj * cout..][..cout];
                        let gi = &mut gi_row[ix * cin..][..cin];
                        for (o, &gv) in g.iter().enumerate() {
                            let wk = &wtap[o * cin..][..cin];
                            for (acc, &wv) in gi.iter_mut().zip(wk) {
                                *acc += gv * wv;
                            }
                        }
                    }
                }
            }
        });

    // --- grad weights: one disjoint (p,q) tap block per task.
    let in_data = input.data();
    let mut grad_w = vec![S::zero(); kernel.weights.len()];
    grad_w
        .par_chunks_mut(cin * cout)
        .enumerate()
        .for_each(|(tap, gw)| {
            let p = tap / kw;
            let q = tap % kw;
            let poff = (p as i64 - chy) * dy;
            let qoff = (q as i64 - chx) * dx;
            let (qlo, qhi) = valid_out_range(qoff, sx, w as i64, ow as i64);
            for b in 0..n {
                let (plo, phi) = valid_out_range(poff, sy, h as i64, oh as i64);
                for oi in plo..phi {
                    let iy = (oi as i64 * sy + poff) as usize;
                    let in_row = &in_data[((b * h + iy) * w) * cin..][..w * cin];
                    let go_row = &go[((b * oh + oi) * ow) * cout..][..ow * cout];
                    for oj in qlo..qhi {
                        let ix = (oj as i64 * sx + qoff) as usize;
                        let x = &in_row[ix * cin..][..cin];
                        let g = &go_row[oj * cout..][..cout];
                        for (k, &xv) in x.iter().enumerate() {
                            let gwk = &mut gw[k * cout..][..cout];
                            for (acc, &gv) in gwk.iter_mut().zip(g) {
                                *acc += xv * gv;
                            }
                        }
                    }
                }
            }
        });

    // --- grad bias: plain sum over all output positions.
    let mut grad_b = vec![S::zero(); cout];
    for row in go.chunks_exact(cout) {
        for (acc, &gv) in grad_b.iter_mut().zip(row) {
            *acc += gv;
        }
    }

    Ok(ConvGrads {
        input: grad_in,
        weights: grad_w,
        bias: grad_b,
    })
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

/// Elementwise `max(0, x)`.
pub fn relu<S: Scalar>(x: &Tensor4<S>) -> Tensor4<S> {
    let mut out = x.clone();
    relu_in_place(&mut out);
    out
}

pub fn relu_in_place<S: Scalar>(x: &mut Tensor4<S>) {
    for v in x.data.iter_mut() {
        if *v < S::zero() {
            *v = S::zero();
        }
    }
}

/// Backward of ReLU using the *post*-activation tensor: the gradient
/// passes exactly where the output is positive (output 0 ⇔ pre-activation
/// <= 0, so nothing is lost by masking on the output).
pub fn relu_backward<S: Scalar>(output: &Tensor4<S>, grad_out: &Tensor4<S>) -> Result<Tensor4<S>> {
    if output.shape() != grad_out.shape() {
        return Err(Error::shape(format!(
            "relu backward shapes differ: {:?} vs {:?}",
            output.shape(),
            grad_out.shape()
        )));
    }
    let mut grad_in = grad_out.clone();
    for (g, &y) in grad_in.data.iter_mut().zip(output.data.iter()) {
        if y <= S::zero() {
            *g = S::zero();
        }
    }
    Ok(grad_in)
}

// ---------------------------------------------------------------------------
// Nearest-neighbour upsampling
// ---------------------------------------------------------------------------

/// Integer-factor nearest upsampling: `out(b,i,j,k) = in(b, i/f, j/f, k)`.
pub fn upsample_nearest<S: Scalar>(x: &Tensor4<S>, factor: usize) -> Result<Tensor4<S>> {
    if factor == 0 {
        return Err(Error::shape("upsample factor must be >= 1"));
    }
    let (n, h, w, c) = x.shape();
    let mut out = Tensor4::zeros(n, h * factor, w * factor, c)?;
    let ow = w * factor;
    for b in 0..n {
        for i in 0..h * factor {
            let src_i = i / factor;
            let src_row = &x.data[((b * h + src_i) * w) * c..][..w * c];
            let dst_row = &mut out.data[((b * h * factor + i) * ow) * c..][..ow * c];
            for j in 0..ow {
                dst_row[j * c..(j + 1) * c].copy_from_slice(&src_row[(j / factor) * c..][..c]);
            }
        }
    }
    Ok(out)
}

/// Backward of nearest upsampling: each source pixel receives the sum of
/// the gradients over its `f x f` output block.
pub fn upsample_nearest_backward<S: Scalar>(
    grad_out: &Tensor4<S>,
    factor: usize,
) -> Result<Tensor4<S>> {
    if factor == 0 {
        return Err(Error::shape("upsample factor must be >= 1"));
    }
    let (n, oh, ow, c) = grad_out.shape();
    if oh % factor != 0 || ow % factor != 0 {
        return Err(Error::shape(format!(
            "gradient dims ({oh},{ow}) not divisible by upsample factor {factor}"
        )));
    }
    let (h, w) = (oh / factor, ow / factor);
    let mut grad_in = Tensor4::zeros(n, h, w, c)?;
    for b in 0..n {
        for i in 0..oh {
            let src_row = &grad_out.data[((b * oh + i) * ow) * c..][..ow * c];
            let dst_row = &mut grad_in.data[((b * h + i / factor) * w) * c..][..w * c];
            for j in 0..ow {
                let dst = &mut dst_row[(j / factor) * c..][..c];
                for (acc, &g) in dst.iter_mut().zip(&src_row[j * c..j * c + c]) {
                    *acc += g;
                }
            }
        }
    }
    Ok(grad_in)
}

// ---------------------------------------------------------------------------
// Channel concat / split
// ---------------------------------------------------------------------------

/// Concatenates two tensors along the channel axis; batch and spatial
/// dims must match.
pub fn concat_channels<S: Scalar>(a: &Tensor4<S>, b: &Tensor4<S>) -> Result<Tensor4<S>> {
    let (n, h, w, ca) = a.shape();
    let (nb, hb, wb, cb) = b.shape();
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(format!(
            "concat needs matching batch/spatial dims, got {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor4::zeros(n, h, w, ca + cb)?;
    let cc = ca + cb;
    for (px, (pa, pb)) in out
        .data
        .chunks_exact_mut(cc)
        .zip(a.data.chunks_exact(ca).zip(b.data.chunks_exact(cb)))
    {
        px[..ca].copy_from_slice(pa);
        px[ca..].copy_from_slice(pb);
    }
    Ok(out)
}

/// Inverse of [`concat_channels`]: splits after the first `c_first`
/// channels. Also the backward pass of concat (applied to the gradient).
pub fn split_channels<S: Scalar>(x: &Tensor4<S>, c_first: usize) -> Result<(Tensor4<S>, Tensor4<S>)> {
    let (n, h, w, c) = x.shape();
    if c_first == 0 || c_first >= c {
        return Err(Error::shape(format!(
            "cannot split {c} channels at {c_first}"
        )));
    }
    let mut a = Tensor4::zeros(n, h, w, c_first)?;
    let mut b = Tensor4::zeros(n, h, w, c - c_first)?;
    for ((px, pa), pb) in x
        .data
        .chunks_exact(c)
        .zip(a.data.chunks_exact_mut(c_first))
        .zip(b.data.chunks_exact_mut(c - c_first))
    {
        pa.copy_from_slice(&px[..c_first]);
        pb.copy_from_slice(&px[c_first..]);
    }
    Ok((a, b))
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------
