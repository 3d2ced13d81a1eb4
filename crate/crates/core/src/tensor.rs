//! Rank-4 tensors and the deterministic numeric kernels built on them.
//!
//! Layout is always row-major `(n, c, h, w)`. Every kernel here is a pure
//! function of its arguments; loop orders are fixed so results are bitwise
//! reproducible.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{mismatch, Error, Result};
use crate::scalar::Scalar;

/// Extent of a rank-4 tensor: batch, channels, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    fn check_positive(&self) -> Result<()> {
        for (dim, v) in ["n", "c", "h", "w"].iter().zip(self.dims()) {
            if v == 0 {
                return Err(Error::Config(format!("shape dimension {dim} must be >= 1")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        shape.check_positive()?;
        if data.len() != shape.numel() {
            return Err(mismatch("Tensor::new", "data length", shape.numel(), data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        assert!(shape.numel() > 0, "tensor dimensions must be >= 1");
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` at every position.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        assert!(shape.numel() > 0, "tensor dimensions must be >= 1");
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(b, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// A 1×1×1×1 tensor.
    pub fn scalar(value: T) -> Self {
        Self::full(Shape::new(1, 1, 1, 1), value)
    }

    /// A per-channel vector stored as `(len, 1, 1, 1)`; the layout used for
    /// biases and normalization affines.
    pub fn vector(values: Vec<T>) -> Result<Self> {
        Self::new(Shape::new(values.len(), 1, 1, 1), values)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.offset(n, c, y, x);
        self.data[i] = v;
    }

    /// The scalar value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Usage(format!(
                "item() on tensor of shape {}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn reshape(&self, shape: Shape) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest elementwise absolute difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        ensure_same_shape("max_abs_diff", self.shape, other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    pub fn add_scaled_(&mut self, other: &Self, alpha: T) -> Result<()> {
        ensure_same_shape("add_scaled", self.shape, other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }
}

impl Tensor<f32> {
    /// Little-endian IEEE-754 payload in row-major order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(shape: Shape, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != shape.numel() * 4 {
            return Err(mismatch(
                "Tensor::from_le_bytes",
                "byte length",
                shape.numel() * 4,
                bytes.len(),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(shape, data)
    }
}

fn ensure_same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    for ((dim, x), y) in ["n", "c", "h", "w"].iter().zip(a.dims()).zip(b.dims()) {
        if x != y {
            return Err(mismatch(op, dim, x, y));
        }
    }
    Ok(())
}

/// Geometry of a stride-1 2-D convolution.
///
/// Weight layout is `(out_channels, in_channels / groups, kernel_h, kernel_w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Dense square convolution with "same" zero padding and no bias.
    pub fn dense(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            padding: (kernel - 1) / 2,
            dilation: 1,
            groups: 1,
            has_bias: false,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::dense(in_channels, out_channels, 1)
    }

    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        ConvSpec {
            groups: channels,
            ..Self::dense(channels, channels, kernel)
        }
    }

    /// Sets the dilation and re-derives "same" padding.
    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self.padding = dilation * (self.kernel_h - 1) / 2;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_per_group(),
            self.kernel_h,
            self.kernel_w,
        )
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(self.out_channels, 1, 1, 1)
    }

    /// Trainable scalars in this convolution.
    pub fn param_count(&self) -> usize {
        self.weight_shape().numel() + if self.has_bias { self.out_channels } else { 0 }
    }

    /// Multiply-accumulates for one image at the given output resolution.
    pub fn multadds(&self, out_h: usize, out_w: usize) -> u64 {
        (out_h * out_w) as u64
            * self.out_channels as u64
            * self.in_per_group() as u64
            * (self.kernel_h * self.kernel_w) as u64
    }

    /// Span of input pixels one output pixel sees along each axis.
    pub fn effective_kernel(&self) -> (usize, usize) {
        (
            self.dilation * (self.kernel_h - 1) + 1,
            self.dilation * (self.kernel_w - 1) + 1,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("kernel_h", self.kernel_h),
            ("kernel_w", self.kernel_w),
            ("stride", self.stride),
            ("dilation", self.dilation),
            ("groups", self.groups),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("conv {name} must be positive")));
            }
        }
        if self.stride != 1 {
            return Err(Error::Config(format!(
                "only stride 1 is supported, got {}",
                self.stride
            )));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (eh, ew) = self.effective_kernel();
        let oh = (h + 2 * self.padding).checked_sub(eh).map(|v| v + 1);
        let ow = (w + 2 * self.padding).checked_sub(ew).map(|v| v + 1);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::Config(format!(
                "input {h}x{w} smaller than effective kernel {eh}x{ew} with padding {}",
                self.padding
            ))),
        }
    }
}

/// Output positions `o` in `0..out_len` whose input index `o + offset - pad`
/// falls inside `0..in_len`.
#[inline]
fn valid_range(offset: usize, pad: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(offset);
    let hi = (in_len + pad).saturating_sub(offset).min(out_len);
    (lo, hi.max(lo))
}

fn check_conv_args<T: Scalar>(
    input: Shape,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<()> {
    spec.validate()?;
    if input.c != spec.in_channels {
        return Err(mismatch("conv2d", "input channels", spec.in_channels, input.c));
    }
    let ws = spec.weight_shape();
    let got = weight.shape();
    for ((dim, e), f) in ["weight out_channels", "weight in_channels/groups", "kernel_h", "kernel_w"]
        .iter()
        .zip(ws.dims())
        .zip(got.dims())
    {
        if e != f {
            return Err(mismatch("conv2d", dim, e, f));
        }
    }
    if let Some(b) = bias {
        if b.numel() != spec.out_channels {
            return Err(mismatch("conv2d", "bias length", spec.out_channels, b.numel()));
        }
    }
    Ok(())
}

/// Stride-1 cross-correlation with zero padding, dilation and channel groups.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let is = input.shape();
    check_conv_args(is, weight, bias, spec)?;
    let (oh, ow) = spec.output_size(is.h, is.w)?;
    let os = Shape::new(is.n, spec.out_channels, oh, ow);
    let mut out = Tensor::zeros(os);
    let icpg = spec.in_per_group();
    let ocpg = spec.out_channels / spec.groups;
    let (kh, kw, d, p) = (spec.kernel_h, spec.kernel_w, spec.dilation, spec.padding);
    let pointwise = kh == 1 && kw == 1 && p == 0;
    let oplane = oh * ow;

    for b in 0..is.n {
        for oc in 0..spec.out_channels {
            let g = oc / ocpg;
            let start = (b * spec.out_channels + oc) * oplane;
            let dst = &mut out.data[start..start + oplane];
            if let Some(bias) = bias {
                dst.fill(bias.data[oc]);
            }
            for icg in 0..icpg {
                let src = input.plane(b, g * icpg + icg);
                let wbase = (oc * icpg + icg) * kh * kw;
                if pointwise {
                    let wv = weight.data[wbase];
                    for (o, &i) in dst.iter_mut().zip(src) {
                        *o += wv * i;
                    }
                    continue;
                }
                for ky in 0..kh {
                    let (y0, y1) = valid_range(ky * d, p, is.h, oh);
                    for kx in 0..kw {
                        let wv = weight.data[wbase + ky * kw + kx];
                        let (x0, x1) = valid_range(kx * d, p, is.w, ow);
                        if x0 >= x1 {
                            continue;
                        }
                        let ix0 = x0 + kx * d - p;
                        for oy in y0..y1 {
                            let iy = oy + ky * d - p;
                            let orow = &mut dst[oy * ow + x0..oy * ow + x1];
                            let irow = &src[iy * is.w + ix0..iy * is.w + ix0 + (x1 - x0)];
                            for (o, &i) in orow.iter_mut().zip(irow) {
                                *o += wv * i;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_grad_input<T: Scalar>(
    grad_out: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    input_shape: Shape,
) -> Tensor<T> {
    let os = grad_out.shape();
    let mut gin = Tensor::zeros(input_shape);
    let icpg = spec.in_per_group();
    let ocpg = spec.out_channels / spec.groups;
    let (kh, kw, d, p) = (spec.kernel_h, spec.kernel_w, spec.dilation, spec.padding);
    let (h, w) = (input_shape.h, input_shape.w);
    let iplane = h * w;

    for b in 0..os.n {
        for oc in 0..spec.out_channels {
            let g = oc / ocpg;
            let go = grad_out.plane(b, oc);
            for icg in 0..icpg {
                let ic = g * icpg + icg;
                let start = (b * input_shape.c + ic) * iplane;
                let dst = &mut gin.data[start..start + iplane];
                let wbase = (oc * icpg + icg) * kh * kw;
                for ky in 0..kh {
                    let (y0, y1) = valid_range(ky * d, p, h, os.h);
                    for kx in 0..kw {
                        let wv = weight.data[wbase + ky * kw + kx];
                        let (x0, x1) = valid_range(kx * d, p, w, os.w);
                        if x0 >= x1 {
                            continue;
                        }
                        let ix0 = x0 + kx * d - p;
                        for oy in y0..y1 {
                            let iy = oy + ky * d - p;
                            let grow = &go[oy * os.w + x0..oy * os.w + x1];
                            let irow = &mut dst[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                            for (i, &g) in irow.iter_mut().zip(grow) {
                                *i += wv * g;
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

/// Gradient of [`conv2d`] with respect to its weight.
pub fn conv2d_grad_weight<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    spec: &ConvSpec,
) -> Tensor<T> {
    let os = grad_out.shape();
    let is = input.shape();
    let mut gw = Tensor::zeros(spec.weight_shape());
    let icpg = spec.in_per_group();
    let ocpg = spec.out_channels / spec.groups;
    let (kh, kw, d, p) = (spec.kernel_h, spec.kernel_w, spec.dilation, spec.padding);

    for oc in 0..spec.out_channels {
        let g = oc / ocpg;
        for icg in 0..icpg {
            let ic = g * icpg + icg;
            let wbase = (oc * icpg + icg) * kh * kw;
            for ky in 0..kh {
                let (y0, y1) = valid_range(ky * d, p, is.h, os.h);
                for kx in 0..kw {
                    let (x0, x1) = valid_range(kx * d, p, is.w, os.w);
                    let mut acc = T::zero();
                    if x0 < x1 {
                        let ix0 = x0 + kx * d - p;
                        for b in 0..os.n {
                            let go = grad_out.plane(b, oc);
                            let src = input.plane(b, ic);
                            for oy in y0..y1 {
                                let iy = oy + ky * d - p;
                                let grow = &go[oy * os.w + x0..oy * os.w + x1];
                                let irow = &src[iy * is.w + ix0..iy * is.w + ix0 + (x1 - x0)];
                                for (&g, &i) in grow.iter().zip(irow) {
                                    acc += g * i;
                                }
                            }
                        }
                    }
                    gw.data[wbase + ky * kw + kx] = acc;
                }
            }
        }
    }
    gw
}

/// Gradient of [`conv2d`] with respect to its bias, as a `(C, 1, 1, 1)` vector.
pub fn conv2d_grad_bias<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let os = grad_out.shape();
    let mut gb = Tensor::zeros(Shape::new(os.c, 1, 1, 1));
    for b in 0..os.n {
        for c in 0..os.c {
            gb.data[c] += grad_out.plane(b, c).iter().copied().sum();
        }
    }
    gb
}

/// Sub-pixel upsampling: `out[b, c, y*r+i, x*r+j] = in[b, c*r*r + i*r + j, y, x]`.
pub fn pixel_shuffle<T: Scalar>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if r == 0 || !s.c.is_multiple_of(r * r) {
        return Err(Error::Config(format!(
            "pixel_shuffle: {} channels not divisible by r^2 = {}",
            s.c,
            r * r
        )));
    }
    let oc = s.c / (r * r);
    let os = Shape::new(s.n, oc, s.h * r, s.w * r);
    let mut out = Tensor::zeros(os);
    for b in 0..s.n {
        for c in 0..oc {
            for i in 0..r {
                for j in 0..r {
                    let src = input.plane(b, c * r * r + i * r + j);
                    for y in 0..s.h {
                        for x in 0..s.w {
                            let o = out.offset(b, c, y * r + i, x * r + j);
                            out.data[o] = src[y * s.w + x];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Scalar>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if r == 0 || !s.h.is_multiple_of(r) || !s.w.is_multiple_of(r) {
        return Err(Error::Config(format!(
            "pixel_unshuffle: spatial size {}x{} not divisible by {r}",
            s.h, s.w
        )));
    }
    let (h, w) = (s.h / r, s.w / r);
    let os = Shape::new(s.n, s.c * r * r, h, w);
    let mut out = Tensor::zeros(os);
    for b in 0..s.n {
        for c in 0..s.c {
            for i in 0..r {
                for j in 0..r {
                    for y in 0..h {
                        for x in 0..w {
                            let v = input.at(b, c, y * r + i, x * r + j);
                            out.set(b, c * r * r + i * r + j, y, x, v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[inline]
fn normal_cdf<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * (T::one() + (x * T::from_f64(core::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Exact GELU, `x * Φ(x)`.
pub fn gelu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| x * normal_cdf(x))
}

/// Derivative of GELU: `Φ(x) + x φ(x)`.
pub fn gelu_derivative<T: Scalar>(x: T) -> T {
    let inv_sqrt_2pi = T::from_f64(0.398_942_280_401_432_7);
    let pdf = inv_sqrt_2pi * (-(x * x) * T::from_f64(0.5)).exp();
    normal_cdf(x) + x * pdf
}

pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Usage("concat_channels of zero tensors".into()))?
        .shape();
    let mut channels = 0;
    for p in parts {
        let s = p.shape();
        if s.n != first.n {
            return Err(mismatch("concat_channels", "n", first.n, s.n));
        }
        if s.h != first.h {
            return Err(mismatch("concat_channels", "h", first.h, s.h));
        }
        if s.w != first.w {
            return Err(mismatch("concat_channels", "w", first.w, s.w));
        }
        channels += s.c;
    }
    let os = Shape::new(first.n, channels, first.h, first.w);
    let mut data = Vec::with_capacity(os.numel());
    for b in 0..first.n {
        for p in parts {
            let block = p.shape().c * first.plane();
            data.extend_from_slice(&p.data[b * block..(b + 1) * block]);
        }
    }
    Tensor::new(os, data)
}

/// Splits along channels into consecutive blocks of the given widths.
pub fn split_channels<T: Scalar>(input: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let s = input.shape();
    let total: usize = widths.iter().sum();
    if total != s.c {
        return Err(mismatch("split_channels", "channels", s.c, total));
    }
    let plane = s.plane();
    let mut out: Vec<Vec<T>> = widths
        .iter()
        .map(|w| Vec::with_capacity(s.n * w * plane))
        .collect();
    for b in 0..s.n {
        let mut c0 = 0;
        for (part, &w) in out.iter_mut().zip(widths) {
            let start = (b * s.c + c0) * plane;
            part.extend_from_slice(&input.data[start..start + w * plane]);
            c0 += w;
        }
    }
    out.into_iter()
        .zip(widths)
        .map(|(data, &w)| Tensor::new(Shape::new(s.n, w, s.h, s.w), data))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Mul,
}

pub fn elementwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: ElementwiseOp) -> Result<Tensor<T>> {
    ensure_same_shape("elementwise", a.shape, b.shape)?;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| match op {
            ElementwiseOp::Add => x + y,
            ElementwiseOp::Mul => x * y,
        })
        .collect();
    Ok(Tensor {
        shape: a.shape,
        data,
    })
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise(a, b, ElementwiseOp::Add)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise(a, b, ElementwiseOp::Mul)
}

/// Intermediate values of [`pixel_norm`] kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PixelNormCache<T> {
    /// Normalized input before the affine.
    pub normalized: Tensor<T>,
    /// `1 / sqrt(var + eps)` per `(n, y, x)`.
    pub inv_std: Vec<T>,
}

pub const PIXEL_NORM_EPS: f64 = 1e-6;

/// Normalizes every spatial position across channels, then applies the
/// per-channel affine `gamma * v + beta`.
pub fn pixel_norm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, PixelNormCache<T>)> {
    let s = input.shape();
    if gamma.numel() != s.c {
        return Err(mismatch("pixel_norm", "gamma length", s.c, gamma.numel()));
    }
    if beta.numel() != s.c {
        return Err(mismatch("pixel_norm", "beta length", s.c, beta.numel()));
    }
    let plane = s.plane();
    let inv_c = T::one() / T::from_f64(s.c as f64);
    let mut normalized = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    let mut inv_std = Vec::with_capacity(s.n * plane);
    for b in 0..s.n {
        let base = b * s.c * plane;
        for px in 0..plane {
            let idx = |c: usize| base + c * plane + px;
            let mean = (0..s.c).map(|c| input.data[idx(c)]).sum::<T>() * inv_c;
            let var = (0..s.c)
                .map(|c| {
                    let d = input.data[idx(c)] - mean;
                    d * d
                })
                .sum::<T>()
                * inv_c;
            let r = T::one() / (var + eps).sqrt();
            inv_std.push(r);
            for c in 0..s.c {
                let xh = (input.data[idx(c)] - mean) * r;
                normalized.data[idx(c)] = xh;
                out.data[idx(c)] = gamma.data[c] * xh + beta.data[c];
            }
        }
    }
    Ok((
        out,
        PixelNormCache {
            normalized,
            inv_std,
        },
    ))
}

/// Gradients of [`pixel_norm`] with respect to input, gamma and beta.
pub fn pixel_norm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &PixelNormCache<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = grad_out.shape();
    let plane = s.plane();
    let inv_c = T::one() / T::from_f64(s.c as f64);
    let xhat = &cache.normalized.data;
    let mut gx = Tensor::zeros(s);
    let mut ggamma = Tensor::zeros(Shape::new(s.c, 1, 1, 1));
    let mut gbeta = Tensor::zeros(Shape::new(s.c, 1, 1, 1));
    for b in 0..s.n {
        let base = b * s.c * plane;
        for px in 0..plane {
            let idx = |c: usize| base + c * plane + px;
            let mut mean_d = T::zero();
            let mut mean_dx = T::zero();
            for c in 0..s.c {
                let g = grad_out.data[idx(c)];
                let d = g * gamma.data[c];
                mean_d += d;
                mean_dx += d * xhat[idx(c)];
                ggamma.data[c] += g * xhat[idx(c)];
                gbeta.data[c] += g;
            }
            mean_d *= inv_c;
            mean_dx *= inv_c;
            let r = cache.inv_std[b * plane + px];
            for c in 0..s.c {
                let d = grad_out.data[idx(c)] * gamma.data[c];
                gx.data[idx(c)] = r * (d - mean_d - xhat[idx(c)] * mean_dx);
            }
        }
    }
    (gx, ggamma, gbeta)
}
