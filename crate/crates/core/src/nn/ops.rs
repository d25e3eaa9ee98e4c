//! Tensor kernels over NCHW batches, forward and backward.
//!
//! Every kernel assumes standard (row-major, contiguous) layout; callers pass
//! tensors produced by the graph, which always allocates them that way.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Batch of feature maps, `[batch, channels, height, width]`.
pub type Tensor<T> = Array4<T>;

/// Spatial padding rule with the usual framework semantics: `Same` yields
/// `ceil(in / stride)` outputs and puts any odd padding pixel after the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    Valid,
    Same,
}

/// Output length and leading pad for one spatial axis.
pub fn resolve_axis(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if input < kernel {
                return Err(Error::Shape(format!(
                    "input extent {input} smaller than kernel {kernel}"
                )));
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Ok((out, total / 2))
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Geom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pt: usize,
    pub pl: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Geom {
    pub fn new(
        (c, h, w): (usize, usize, usize),
        (kh, kw): (usize, usize),
        (sh, sw): (usize, usize),
        padding: Padding,
    ) -> Result<Self> {
        let (ho, pt) = resolve_axis(h, kh, sh, padding)?;
        let (wo, pl) = resolve_axis(w, kw, sw, padding)?;
        Ok(Self {
            c,
            h,
            w,
            kh,
            kw,
            sh,
            sw,
            pt,
            pl,
            ho,
            wo,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.pt == 0 && self.pl == 0
    }

    /// Input coordinate for output `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn src_y(&self, o: usize, k: usize) -> Option<usize> {
        (o * self.sh + k).checked_sub(self.pt).filter(|&y| y < self.h)
    }

    #[inline]
    fn src_x(&self, o: usize, k: usize) -> Option<usize> {
        (o * self.sw + k).checked_sub(self.pl).filter(|&x| x < self.w)
    }
}

fn std_slice<T>(t: &Tensor<T>) -> &[T] {
    t.as_slice().expect("tensor in standard layout")
}

fn im2col<T: Scalar>(x: &[T], g: &Geom, cols: &mut [T]) {
    let plane = g.ho * g.wo;
    for c in 0..g.c {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let d = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    match g.src_y(oy, ky) {
                        None => d.fill(T::zero()),
                        Some(iy) => {
                            let src = &xc[iy * g.w..(iy + 1) * g.w];
                            for (ox, v) in d.iter_mut().enumerate() {
                                *v = g.src_x(ox, kx).map_or(T::zero(), |ix| src[ix]);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &Geom, dx: &mut [T]) {
    let plane = g.ho * g.wo;
    for c in 0..g.c {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let Some(iy) = g.src_y(oy, ky) else { continue };
                    let s = &src[oy * g.wo..(oy + 1) * g.wo];
                    let d = &mut dxc[iy * g.w..(iy + 1) * g.w];
                    for (ox, &v) in s.iter().enumerate() {
                        if let Some(ix) = g.src_x(ox, kx) {
                            d[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

fn check_kernel_channels(x: &Tensor<impl Scalar>, expected: usize, what: &str) -> Result<()> {
    if x.dim().1 != expected {
        return Err(Error::Shape(format!(
            "{what}: input has {} channels, kernel expects {expected}",
            x.dim().1
        )));
    }
    Ok(())
}

/// Dense 2-D convolution; `kernel` is `[out, in, kh, kw]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: ArrayView4<T>,
    bias: Option<ArrayView1<T>>,
    stride: (usize, usize),
    padding: Padding,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dim();
    let (o, i, kh, kw) = kernel.dim();
    check_kernel_channels(x, i, "conv2d")?;
    let g = Geom::new((c, h, w), (kh, kw), stride, padding)?;
    let k2 = kernel
        .to_shape((o, i * kh * kw))
        .map_err(|e| Error::Shape(e.to_string()))?;
    let mut out = Tensor::<T>::zeros((n, o, g.ho, g.wo));
    let mut cols = if g.is_pointwise() {
        Array2::zeros((0, 0))
    } else {
        Array2::zeros((i * kh * kw, g.ho * g.wo))
    };
    for b in 0..n {
        let xb = x.index_axis(Axis(0), b);
        let mut ob = out
            .index_axis_mut(Axis(0), b)
            .into_shape_with_order((o, g.ho * g.wo))
            .expect("contiguous output");
        if g.is_pointwise() {
            let xv = xb.into_shape_with_order((c, h * w)).expect("contiguous input");
            general_mat_mul(T::one(), &k2, &xv, T::zero(), &mut ob);
        } else {
            im2col(xb.as_slice().expect("contiguous input"), &g, cols.as_slice_mut().unwrap());
            general_mat_mul(T::one(), &k2, &cols, T::zero(), &mut ob);
        }
        if let Some(bias) = bias {
            for (mut row, &bv) in ob.outer_iter_mut().zip(bias.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`]: `(dx if requested, dkernel, dbias)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: ArrayView4<T>,
    dy: &Tensor<T>,
    stride: (usize, usize),
    padding: Padding,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Array4<T>, Array1<T>)> {
    let (n, c, h, w) = x.dim();
    let (o, i, kh, kw) = kernel.dim();
    let g = Geom::new((c, h, w), (kh, kw), stride, padding)?;
    let k2 = kernel
        .to_shape((o, i * kh * kw))
        .map_err(|e| Error::Shape(e.to_string()))?;
    let mut dk2 = Array2::<T>::zeros((o, i * kh * kw));
    let mut dx = need_dx.then(|| Tensor::<T>::zeros((n, c, h, w)));
    let pointwise = g.is_pointwise();
    let mut cols = Array2::<T>::zeros(if pointwise { (0, 0) } else { (i * kh * kw, g.ho * g.wo) });
    let mut dcols = Array2::<T>::zeros((i * kh * kw, g.ho * g.wo));
    for b in 0..n {
        let dyb = dy
            .index_axis(Axis(0), b)
            .into_shape_with_order((o, g.ho * g.wo))
            .expect("contiguous grad");
        let xb = x.index_axis(Axis(0), b);
        if pointwise {
            let xv = xb.into_shape_with_order((c, h * w)).expect("contiguous input");
            general_mat_mul(T::one(), &dyb, &xv.t(), T::one(), &mut dk2);
        } else {
            im2col(xb.as_slice().expect("contiguous input"), &g, cols.as_slice_mut().unwrap());
            general_mat_mul(T::one(), &dyb, &cols.t(), T::one(), &mut dk2);
        }
        if let Some(dx) = dx.as_mut() {
            general_mat_mul(T::one(), &k2.t(), &dyb, T::zero(), &mut dcols);
            let mut dxb = dx.index_axis_mut(Axis(0), b);
            let dxs = dxb.as_slice_mut().expect("contiguous grad");
            if pointwise {
                dxs.copy_from_slice(dcols.as_slice().unwrap());
            } else {
                col2im(dcols.as_slice().unwrap(), &g, dxs);
            }
        }
    }
    let db = dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
    let dk = dk2
        .into_shape_with_order((o, i, kh, kw))
        .expect("kernel grad reshape");
    Ok((dx, dk, db))
}

/// Depthwise convolution with multiplier 1; `kernel` is `[channels, 1, kh, kw]`.
pub fn depthwise_conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: ArrayView4<T>,
    bias: Option<ArrayView1<T>>,
    stride: (usize, usize),
    padding: Padding,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dim();
    let (kc, _, kh, kw) = kernel.dim();
    check_kernel_channels(x, kc, "depthwise_conv2d")?;
    let g = Geom::new((c, h, w), (kh, kw), stride, padding)?;
    let k = kernel.as_standard_layout();
    let ks = k.as_slice().unwrap();
    let xs = std_slice(x);
    let mut out = Tensor::<T>::zeros((n, c, g.ho, g.wo));
    let os = out.as_slice_mut().unwrap();
    for b in 0..n {
        for ch in 0..c {
            let plane = b * c + ch;
            let xp = &xs[plane * h * w..(plane + 1) * h * w];
            let op = &mut os[plane * g.ho * g.wo..(plane + 1) * g.ho * g.wo];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = ks[(ch * kh + ky) * kw + kx];
                    for oy in 0..g.ho {
                        let Some(iy) = g.src_y(oy, ky) else { continue };
                        let row = &xp[iy * w..(iy + 1) * w];
                        let orow = &mut op[oy * g.wo..(oy + 1) * g.wo];
                        for (ox, ov) in orow.iter_mut().enumerate() {
                            if let Some(ix) = g.src_x(ox, kx) {
                                *ov += wv * row[ix];
                            }
                        }
                    }
                }
            }
            if let Some(bias) = bias {
                let bv = bias[ch];
                op.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: ArrayView4<T>,
    dy: &Tensor<T>,
    stride: (usize, usize),
    padding: Padding,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Array4<T>, Array1<T>)> {
    let (n, c, h, w) = x.dim();
    let (_, _, kh, kw) = kernel.dim();
    let g = Geom::new((c, h, w), (kh, kw), stride, padding)?;
    let k = kernel.as_standard_layout();
    let ks = k.as_slice().unwrap();
    let xs = std_slice(x);
    let dys = std_slice(dy);
    let mut dk = Array4::<T>::zeros((c, 1, kh, kw));
    let dks = dk.as_slice_mut().unwrap();
    let mut dx = need_dx.then(|| Tensor::<T>::zeros((n, c, h, w)));
    for b in 0..n {
        for ch in 0..c {
            let plane = b * c + ch;
            let xp = &xs[plane * h * w..(plane + 1) * h * w];
            let dyp = &dys[plane * g.ho * g.wo..(plane + 1) * g.ho * g.wo];
            for ky in 0..kh {
                for kx in 0..kw {
                    let widx = (ch * kh + ky) * kw + kx;
                    let wv = ks[widx];
                    let mut acc = T::zero();
                    for oy in 0..g.ho {
                        let Some(iy) = g.src_y(oy, ky) else { continue };
                        for ox in 0..g.wo {
                            if let Some(ix) = g.src_x(ox, kx) {
                                let d = dyp[oy * g.wo + ox];
                                acc += d * xp[iy * w + ix];
                                if let Some(dx) = dx.as_mut() {
                                    let dxs = dx.as_slice_mut().unwrap();
                                    let at = plane * h * w + iy * w + ix;
                                    dxs[at] += d * wv;
                                }
                            }
                        }
                    }
                    dks[widx] += acc;
                }
            }
        }
    }
    let db = dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
    Ok((dx, dk, db))
}

/// Max pooling; padded positions never win.
pub fn max_pool<T: Scalar>(
    x: &Tensor<T>,
    size: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dim();
    let g = Geom::new((c, h, w), size, stride, padding)?;
    let xs = std_slice(x);
    let mut out = Tensor::<T>::zeros((n, c, g.ho, g.wo));
    let os = out.as_slice_mut().unwrap();
    for plane in 0..n * c {
        let xp = &xs[plane * h * w..(plane + 1) * h * w];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                os[(plane * g.ho + oy) * g.wo + ox] = pool_argmax(xp, &g, oy, ox).1;
            }
        }
    }
    Ok(out)
}

fn pool_argmax<T: Scalar>(xp: &[T], g: &Geom, oy: usize, ox: usize) -> (usize, T) {
    let mut best = (usize::MAX, T::neg_infinity());
    for ky in 0..g.kh {
        let Some(iy) = g.src_y(oy, ky) else { continue };
        for kx in 0..g.kw {
            let Some(ix) = g.src_x(ox, kx) else { continue };
            let v = xp[iy * g.w + ix];
            if best.0 == usize::MAX || v > best.1 {
                best = (iy * g.w + ix, v);
            }
        }
    }
    best
}

pub fn max_pool_backward<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    size: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dim();
    let g = Geom::new((c, h, w), size, stride, padding)?;
    let xs = std_slice(x);
    let dys = std_slice(dy);
    let mut dx = Tensor::<T>::zeros((n, c, h, w));
    let dxs = dx.as_slice_mut().unwrap();
    for plane in 0..n * c {
        let xp = &xs[plane * h * w..(plane + 1) * h * w];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let (idx, _) = pool_argmax(xp, &g, oy, ox);
                let at = plane * h * w + idx;
                dxs[at] += dys[(plane * g.ho + oy) * g.wo + ox];
            }
        }
    }
    Ok(dx)
}

/// Average pooling; the divisor counts only in-image taps.
pub fn avg_pool<T: Scalar>(
    x: &Tensor<T>,
    size: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dim();
    let g = Geom::new((c, h, w), size, stride, padding)?;
    let xs = std_slice(x);
    let mut out = Tensor::<T>::zeros((n, c, g.ho, g.wo));
    let os = out.as_slice_mut().unwrap();
    for plane in 0..n * c {
        let xp = &xs[plane * h * w..(plane + 1) * h * w];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut acc = T::zero();
                let mut count = 0usize;
                for_each_tap(&g, oy, ox, |idx| {
                    acc += xp[idx];
                    count += 1;
                });
                os[(plane * g.ho + oy) * g.wo + ox] = acc / lit::<T>(count as f64);
            }
        }
    }
    Ok(out)
}

#[inline]
fn for_each_tap(g: &Geom, oy: usize, ox: usize, mut f: impl FnMut(usize)) {
    for ky in 0..g.kh {
        let Some(iy) = g.src_y(oy, ky) else { continue };
        for kx in 0..g.kw {
            if let Some(ix) = g.src_x(ox, kx) {
                f(iy * g.w + ix);
            }
        }
    }
}

pub fn avg_pool_backward<T: Scalar>(
    x_dim: (usize, usize, usize, usize),
    dy: &Tensor<T>,
    size: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x_dim;
    let g = Geom::new((c, h, w), size, stride, padding)?;
    let dys = std_slice(dy);
    let mut dx = Tensor::<T>::zeros((n, c, h, w));
    let dxs = dx.as_slice_mut().unwrap();
    for plane in 0..n * c {
        let dp = &mut dxs[plane * h * w..(plane + 1) * h * w];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut count = 0usize;
                for_each_tap(&g, oy, ox, |_| count += 1);
                let share = dys[(plane * g.ho + oy) * g.wo + ox] / lit::<T>(count as f64);
                for_each_tap(&g, oy, ox, |idx| dp[idx] += share);
            }
        }
    }
    Ok(dx)
}

/// Spatial mean per channel, keeping `[n, c, 1, 1]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dim();
    let area = lit::<T>((h * w) as f64);
    let xs = std_slice(x);
    let mut out = Tensor::<T>::zeros((n, c, 1, 1));
    for (plane, o) in out.iter_mut().enumerate() {
        let sum = xs[plane * h * w..(plane + 1) * h * w]
            .iter()
            .fold(T::zero(), |a, &v| a + v);
        *o = sum / area;
    }
    out
}

pub fn global_avg_pool_backward<T: Scalar>(x_dim: (usize, usize, usize, usize), dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x_dim;
    let area = lit::<T>((h * w) as f64);
    let mut dx = Tensor::<T>::zeros((n, c, h, w));
    let dxs = dx.as_slice_mut().unwrap();
    for (plane, &d) in dy.iter().enumerate() {
        dxs[plane * h * w..(plane + 1) * h * w].fill(d / area);
    }
    dx
}

/// Zero padding `(top, bottom, left, right)`.
pub fn zero_pad<T: Scalar>(x: &Tensor<T>, pad: (usize, usize, usize, usize)) -> Tensor<T> {
    let (n, c, h, w) = x.dim();
    let (t, b, l, r) = pad;
    let mut out = Tensor::<T>::zeros((n, c, h + t + b, w + l + r));
    out.slice_mut(ndarray::s![.., .., t..t + h, l..l + w]).assign(x);
    out
}

pub fn zero_pad_backward<T: Scalar>(dy: &Tensor<T>, pad: (usize, usize, usize, usize)) -> Tensor<T> {
    let (_, _, h, w) = dy.dim();
    let (t, b, l, r) = pad;
    dy.slice(ndarray::s![.., .., t..h - b, l..w - r]).to_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Relu6,
    /// `relu6(x + 3) / 6`
    HardSigmoid,
    /// `x * hard_sigmoid(x)`
    HardSwish,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        let six = lit::<T>(6.0);
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Relu6 => x.max(T::zero()).min(six),
            Activation::HardSigmoid => (x + lit(3.0)).max(T::zero()).min(six) / six,
            Activation::HardSwish => x * ((x + lit(3.0)).max(T::zero()).min(six) / six),
        }
    }

    /// Derivative at pre-activation `x`.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        let zero = T::zero();
        let three = lit::<T>(3.0);
        match self {
            Activation::Relu => {
                if x > zero {
                    T::one()
                } else {
                    zero
                }
            }
            Activation::Relu6 => {
                if x > zero && x < lit(6.0) {
                    T::one()
                } else {
                    zero
                }
            }
            Activation::HardSigmoid => {
                if x > -three && x < three {
                    lit(1.0 / 6.0)
                } else {
                    zero
                }
            }
            Activation::HardSwish => {
                if x <= -three {
                    zero
                } else if x >= three {
                    T::one()
                } else {
                    (lit::<T>(2.0) * x + three) / lit(6.0)
                }
            }
        }
    }
}

/// Per-channel batch statistics saved by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Array1<T>,
}

/// Inference-mode batch norm with the given per-channel statistics.
pub fn batch_norm_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: Option<&Array1<T>>,
    beta: Option<&Array1<T>>,
    mean: &Array1<T>,
    var: &Array1<T>,
    eps: T,
) -> Tensor<T> {
    let (n, c, h, w) = x.dim();
    let mut out = x.clone();
    let os = out.as_slice_mut().unwrap();
    for ch in 0..c {
        let scale = gamma.map_or(T::one(), |g| g[ch]) / (var[ch] + eps).sqrt();
        let shift = beta.map_or(T::zero(), |b| b[ch]) - mean[ch] * scale;
        for b in 0..n {
            let plane = b * c + ch;
            os[plane * h * w..(plane + 1) * h * w]
                .iter_mut()
                .for_each(|v| *v = *v * scale + shift);
        }
    }
    out
}

/// Training-mode batch norm. Returns output, batch mean, biased batch
/// variance and the cache needed by the backward pass.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: Option<&Array1<T>>,
    beta: Option<&Array1<T>>,
    eps: T,
) -> (Tensor<T>, Array1<T>, Array1<T>, BatchNormCache<T>) {
    let (n, c, h, w) = x.dim();
    let m = lit::<T>((n * h * w) as f64);
    let xs = std_slice(x);
    let mut mean = Array1::<T>::zeros(c);
    let mut var = Array1::<T>::zeros(c);
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let plane = b * c + ch;
            s = xs[plane * h * w..(plane + 1) * h * w]
                .iter()
                .fold(s, |a, &v| a + v);
        }
        let mu = s / m;
        let mut ss = T::zero();
        for b in 0..n {
            let plane = b * c + ch;
            ss = xs[plane * h * w..(plane + 1) * h * w]
                .iter()
                .fold(ss, |a, &v| a + (v - mu) * (v - mu));
        }
        mean[ch] = mu;
        var[ch] = ss / m;
    }
    let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
    let mut normalized = x.clone();
    let mut out = x.clone();
    {
        let ns = normalized.as_slice_mut().unwrap();
        let os = out.as_slice_mut().unwrap();
        for ch in 0..c {
            let g = gamma.map_or(T::one(), |g| g[ch]);
            let bt = beta.map_or(T::zero(), |b| b[ch]);
            for b in 0..n {
                let plane = b * c + ch;
                for i in plane * h * w..(plane + 1) * h * w {
                    let xh = (ns[i] - mean[ch]) * inv_std[ch];
                    ns[i] = xh;
                    os[i] = xh * g + bt;
                }
            }
        }
    }
    (out, mean, var, BatchNormCache { normalized, inv_std })
}

/// Backward of training-mode batch norm: `(dx, dgamma, dbeta)`.
pub fn batch_norm_train_backward<T: Scalar>(
    dy: &Tensor<T>,
    gamma: Option<&Array1<T>>,
    cache: &BatchNormCache<T>,
) -> (Tensor<T>, Array1<T>, Array1<T>) {
    let (n, c, h, w) = dy.dim();
    let m = lit::<T>((n * h * w) as f64);
    let dys = std_slice(dy);
    let xh = std_slice(&cache.normalized);
    let mut dgamma = Array1::<T>::zeros(c);
    let mut dbeta = Array1::<T>::zeros(c);
    let mut dx = Tensor::<T>::zeros((n, c, h, w));
    let dxs = dx.as_slice_mut().unwrap();
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for b in 0..n {
            let plane = b * c + ch;
            for i in plane * h * w..(plane + 1) * h * w {
                sum_dy += dys[i];
                sum_dy_xh += dys[i] * xh[i];
            }
        }
        dgamma[ch] = sum_dy_xh;
        dbeta[ch] = sum_dy;
        let g = gamma.map_or(T::one(), |g| g[ch]);
        let k = g * cache.inv_std[ch] / m;
        for b in 0..n {
            let plane = b * c + ch;
            for i in plane * h * w..(plane + 1) * h * w {
                dxs[i] = k * (m * dys[i] - sum_dy - xh[i] * sum_dy_xh);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Multiply each channel plane of `x` by the matching entry of `s` (`[n, c, 1, 1]`).
pub fn channel_scale<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dim();
    if s.dim() != (n, c, 1, 1) {
        return Err(Error::Shape(format!(
            "channel scale {:?} does not match {:?}",
            s.dim(),
            x.dim()
        )));
    }
    let mut out = x.clone();
    let os = out.as_slice_mut().unwrap();
    for (plane, &sv) in s.iter().enumerate() {
        os[plane * h * w..(plane + 1) * h * w]
            .iter_mut()
            .for_each(|v| *v *= sv);
    }
    Ok(out)
}

pub fn channel_scale_backward<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = x.dim();
    let xs = std_slice(x);
    let dys = std_slice(dy);
    let mut dx = dy.clone();
    let mut ds = Tensor::<T>::zeros((n, c, 1, 1));
    let dxs = dx.as_slice_mut().unwrap();
    for (plane, (&sv, d)) in s.iter().zip(ds.iter_mut()).enumerate() {
        let range = plane * h * w..(plane + 1) * h * w;
        *d = xs[range.clone()]
            .iter()
            .zip(&dys[range.clone()])
            .fold(T::zero(), |a, (&xv, &dv)| a + xv * dv);
        dxs[range].iter_mut().for_each(|v| *v *= sv);
    }
    (dx, ds)
}

/// Channel concatenation.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (n, _, h, w) = parts[0].dim();
    if parts.iter().any(|p| {
        let (pn, _, ph, pw) = p.dim();
        (pn, ph, pw) != (n, h, w)
    }) {
        return Err(Error::Shape("concat inputs differ in batch or spatial size".into()));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(1), &views)
        .map(|t| t.as_standard_layout().into_owned())
        .map_err(|e| Error::Shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: (usize, usize, usize, usize), seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct-sum convolution used as an independent reference.
    fn conv_reference(
        x: &Tensor<f64>,
        k: &Array4<f64>,
        stride: (usize, usize),
        padding: Padding,
    ) -> Tensor<f64> {
        let (n, c, h, w) = x.dim();
        let (o, _, kh, kw) = k.dim();
        let (ho, pt) = resolve_axis(h, kh, stride.0, padding).unwrap();
        let (wo, pl) = resolve_axis(w, kw, stride.1, padding).unwrap();
        Array::from_shape_fn((n, o, ho, wo), |(b, oc, oy, ox)| {
            let mut acc = 0.0;
            for ic in 0..c {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride.0 + ky) as isize - pt as isize;
                        let ix = (ox * stride.1 + kx) as isize - pl as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += x[[b, ic, iy as usize, ix as usize]] * k[[oc, ic, ky, kx]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn same_padding_puts_extra_pixel_after() {
        // 224 with k=3, s=2: out 112, total pad 1 -> 0 before, 1 after.
        assert_eq!(resolve_axis(224, 3, 2, Padding::Same).unwrap(), (112, 0));
        assert_eq!(resolve_axis(7, 3, 1, Padding::Same).unwrap(), (7, 1));
        assert_eq!(resolve_axis(9, 3, 2, Padding::Valid).unwrap(), (4, 0));
        assert!(resolve_axis(2, 3, 1, Padding::Valid).is_err());
    }

    #[test]
    fn conv_matches_direct_sum() {
        for (stride, padding, kshape) in [
            ((1, 1), Padding::Same, (4, 3, 3, 3)),
            ((2, 2), Padding::Valid, (5, 3, 3, 3)),
            ((2, 2), Padding::Same, (2, 3, 5, 5)),
            ((1, 1), Padding::Same, (3, 3, 1, 7)),
            ((1, 1), Padding::Valid, (6, 3, 1, 1)),
        ] {
            let x = random((2, 3, 9, 8), 1);
            let k = random(kshape, 2);
            let got = conv2d(&x, k.view(), None, stride, padding).unwrap();
            let want = conv_reference(&x, &k, stride, padding);
            assert_eq!(got.dim(), want.dim());
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn depthwise_matches_per_channel_dense_conv() {
        let x = random((2, 4, 7, 6), 3);
        let k = random((4, 1, 3, 3), 4);
        let got = depthwise_conv2d(&x, k.view(), None, (2, 2), Padding::Same).unwrap();
        for ch in 0..4 {
            let xc = x.slice(ndarray::s![.., ch..ch + 1, .., ..]).to_owned();
            let kc = k.slice(ndarray::s![ch..ch + 1, .., .., ..]).to_owned();
            let want = conv_reference(&xc, &kc, (2, 2), Padding::Same);
            let g = got.slice(ndarray::s![.., ch..ch + 1, .., ..]);
            for (a, b) in g.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Central differences of `sum(f(x) * probe)` against the analytic input gradient.
    fn check_input_grad(
        x: &Tensor<f64>,
        f: impl Fn(&Tensor<f64>) -> Tensor<f64>,
        analytic: impl Fn(&Tensor<f64>) -> Tensor<f64>,
    ) {
        let y = f(x);
        let probe = random(y.dim(), 99);
        let dx = analytic(&probe);
        let eps = 1e-6;
        for idx in [0usize, 5, 17, x.len() / 2, x.len() - 1].map(|i| i % x.len()) {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            xm.as_slice_mut().unwrap()[idx] -= eps;
            let fp: f64 = (&f(&xp) * &probe).sum();
            let fm: f64 = (&f(&xm) * &probe).sum();
            let numeric = (fp - fm) / (2.0 * eps);
            let a = dx.as_slice().unwrap()[idx];
            assert!(
                (numeric - a).abs() < 1e-5 * (1.0 + numeric.abs()),
                "idx {idx}: numeric {numeric}, analytic {a}"
            );
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x = random((2, 3, 6, 5), 5);
        let k = random((4, 3, 3, 3), 6);
        let f = |x: &Tensor<f64>| conv2d(x, k.view(), None, (2, 2), Padding::Same).unwrap();
        check_input_grad(&x, f, |dy| {
            conv2d_backward(&x, k.view(), dy, (2, 2), Padding::Same, true)
                .unwrap()
                .0
                .unwrap()
        });

        // kernel gradient, probed the same way
        let y = f(&x);
        let probe = random(y.dim(), 7);
        let (_, dk, _) = conv2d_backward(&x, k.view(), &probe, (2, 2), Padding::Same, false).unwrap();
        let eps = 1e-6;
        for idx in [0usize, 13, 50, k.len() - 1] {
            let mut kp = k.clone();
            let mut km = k.clone();
            kp.as_slice_mut().unwrap()[idx] += eps;
            km.as_slice_mut().unwrap()[idx] -= eps;
            let fp: f64 = (&conv2d(&x, kp.view(), None, (2, 2), Padding::Same).unwrap() * &probe).sum();
            let fm: f64 = (&conv2d(&x, km.view(), None, (2, 2), Padding::Same).unwrap() * &probe).sum();
            let numeric = (fp - fm) / (2.0 * eps);
            assert!((numeric - dk.as_slice().unwrap()[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn depthwise_gradients_match_finite_differences() {
        let x = random((2, 3, 6, 7), 8);
        let k = random((3, 1, 3, 3), 9);
        check_input_grad(
            &x,
            |x| depthwise_conv2d(x, k.view(), None, (2, 2), Padding::Same).unwrap(),
            |dy| {
                depthwise_conv2d_backward(&x, k.view(), dy, (2, 2), Padding::Same, true)
                    .unwrap()
                    .0
                    .unwrap()
            },
        );
    }

    #[test]
    fn pooling_gradients_match_finite_differences() {
        let x = random((1, 2, 7, 6), 10);
        check_input_grad(
            &x,
            |x| max_pool(x, (3, 3), (2, 2), Padding::Same).unwrap(),
            |dy| max_pool_backward(&x, dy, (3, 3), (2, 2), Padding::Same).unwrap(),
        );
        check_input_grad(
            &x,
            |x| avg_pool(x, (3, 3), (1, 1), Padding::Same).unwrap(),
            |dy| avg_pool_backward(x.dim(), dy, (3, 3), (1, 1), Padding::Same).unwrap(),
        );
        check_input_grad(&x, global_avg_pool, |dy| global_avg_pool_backward(x.dim(), dy));
    }

    #[test]
    fn batch_norm_gradient_matches_finite_differences() {
        let x = random((3, 2, 4, 3), 11);
        let gamma = Array1::from(vec![1.5, -0.7]);
        let beta = Array1::from(vec![0.1, 0.2]);
        let f = |x: &Tensor<f64>| batch_norm_train(x, Some(&gamma), Some(&beta), 1e-3).0;
        let (_, _, _, cache) = batch_norm_train(&x, Some(&gamma), Some(&beta), 1e-3);
        check_input_grad(&x, f, |dy| batch_norm_train_backward(dy, Some(&gamma), &cache).0);
    }

    #[test]
    fn channel_scale_gradient_matches_finite_differences() {
        let x = random((2, 3, 4, 4), 12);
        let s = random((2, 3, 1, 1), 13);
        check_input_grad(
            &x,
            |x| channel_scale(x, &s).unwrap(),
            |dy| channel_scale_backward(&x, &s, dy).0,
        );
        check_input_grad(
            &s,
            |s| channel_scale(&x, s).unwrap(),
            |dy| channel_scale_backward(&x, &s, dy).1,
        );
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        for act in [
            Activation::Relu,
            Activation::Relu6,
            Activation::HardSigmoid,
            Activation::HardSwish,
        ] {
            for x in [-4.2f64, -2.5, -0.3, 0.4, 2.9, 5.5, 7.0] {
                let eps = 1e-6;
                let numeric = (act.apply(x + eps) - act.apply(x - eps)) / (2.0 * eps);
                assert!((numeric - act.derivative(x)).abs() < 1e-6, "{act:?} at {x}");
            }
        }
    }

    #[test]
    fn zero_pad_roundtrips_through_backward() {
        let x = random((1, 2, 3, 4), 14);
        let p = zero_pad(&x, (1, 2, 0, 3));
        assert_eq!(p.dim(), (1, 2, 6, 7));
        assert_eq!(zero_pad_backward(&p, (1, 2, 0, 3)), x);
        let _ = IxDyn(&[0]);
    }
}
