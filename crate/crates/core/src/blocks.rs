//! Composite layers of the network: BSConv, the three refinement block
//! variants, large kernel attention and the full distillation block.
//!
//! Every forward is generic over [`Graph`], so the same code runs eagerly for
//! inference and on a [`crate::Tape`] for training.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Param};
use crate::error::{mismatch, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ConvSpec, Tensor};

/// Draws weights and biases from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub struct Initializer<'r, R: Rng> {
    rng: &'r mut R,
}

impl<'r, R: Rng> Initializer<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Initializer { rng }
    }

    fn uniform<T: Scalar>(&mut self, shape: crate::Shape, bound: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_, _, _, _| {
            T::from_f64(self.rng.gen_range(-bound..bound))
        })
    }

    pub fn conv<T: Scalar>(&mut self, prefix: &str, spec: ConvSpec) -> ConvParams<T> {
        let fan_in = (spec.in_per_group() * spec.kernel_h * spec.kernel_w) as f64;
        let bound = 1.0 / libm::sqrt(fan_in);
        let weight = self.uniform(spec.weight_shape(), bound);
        let bias = spec
            .has_bias
            .then(|| Param::new(format!("{prefix}.bias"), self.uniform(spec.bias_shape(), bound)));
        ConvParams {
            name: prefix.into(),
            spec,
            weight: Param::new(format!("{prefix}.weight"), weight),
            bias,
        }
    }
}

/// One convolution: geometry plus named weight and optional bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T = f32> {
    pub name: String,
    pub spec: ConvSpec,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> ConvParams<T> {
    /// Builds from explicit tensors, validating shapes against `spec`.
    pub fn from_tensors(
        name: &str,
        spec: ConvSpec,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
    ) -> Result<Self> {
        spec.validate()?;
        if weight.shape() != spec.weight_shape() {
            return Err(Error::Config(format!(
                "{name}: weight shape {} does not match {}",
                weight.shape(),
                spec.weight_shape()
            )));
        }
        if bias.is_some() != spec.has_bias {
            return Err(Error::Config(format!("{name}: bias presence disagrees with spec")));
        }
        if let Some(b) = &bias {
            if b.numel() != spec.out_channels {
                return Err(mismatch("ConvParams", "bias length", spec.out_channels, b.numel()));
            }
        }
        Ok(ConvParams {
            name: name.into(),
            spec,
            weight: Param::new(format!("{name}.weight"), weight),
            bias: bias.map(|b| Param::new(format!("{name}.bias"), b)),
        })
    }

    pub fn zeros(name: &str, spec: ConvSpec) -> Self {
        let bias = spec.has_bias.then(|| Tensor::zeros(spec.bias_shape()));
        Self::from_tensors(name, spec, Tensor::zeros(spec.weight_shape()), bias)
            .expect("zero tensors match their own spec")
    }

    pub fn forward<G: Graph<T>>(&self, g: &mut G, x: &G::Value) -> Result<G::Value> {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        g.conv2d(x, &w, b.as_ref(), &self.spec)
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        core::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        core::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ConvParams<U> {
        ConvParams {
            name: self.name.clone(),
            spec: self.spec,
            weight: self.weight.cast(),
            bias: self.bias.as_ref().map(Param::cast),
        }
    }

    pub(crate) fn layers(&self, out: &mut Vec<(String, ConvSpec)>) {
        out.push((self.name.clone(), self.spec));
    }
}

/// Blueprint separable convolution: pointwise `C_in -> C_out`, then a
/// depthwise `k×k` on `C_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct BsConvParams<T = f32> {
    pub pointwise: ConvParams<T>,
    pub depthwise: ConvParams<T>,
}

impl<T: Scalar> BsConvParams<T> {
    pub fn specs(in_channels: usize, out_channels: usize, kernel: usize, bias: bool) -> [ConvSpec; 2] {
        [
            ConvSpec::pointwise(in_channels, out_channels).with_bias(bias),
            ConvSpec::depthwise(out_channels, kernel).with_bias(bias),
        ]
    }

    pub fn init<R: Rng>(
        init: &mut Initializer<'_, R>,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
    ) -> Self {
        let [pw, dw] = Self::specs(in_channels, out_channels, kernel, bias);
        BsConvParams {
            pointwise: init.conv(&format!("{prefix}.pw"), pw),
            depthwise: init.conv(&format!("{prefix}.dw"), dw),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.pointwise.params();
        v.extend(self.depthwise.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.pointwise.params_mut();
        v.extend(self.depthwise.params_mut());
        v
    }

    pub fn cast<U: Scalar>(&self) -> BsConvParams<U> {
        BsConvParams {
            pointwise: self.pointwise.cast(),
            depthwise: self.depthwise.cast(),
        }
    }

    pub(crate) fn layers(&self, out: &mut Vec<(String, ConvSpec)>) {
        self.pointwise.layers(out);
        self.depthwise.layers(out);
    }
}

pub fn bsconv_forward<T: Scalar, G: Graph<T>>(
    g: &mut G,
    x: &G::Value,
    p: &BsConvParams<T>,
) -> Result<G::Value> {
    let y = p.pointwise.forward(g, x)?;
    p.depthwise.forward(g, &y)
}

/// Large kernel attention: `pw -> dw 5×5 -> dw 5×5 dilation 3`, multiplied
/// elementwise into the input. No nonlinearity inside the attention branch.
#[derive(Debug, Clone, PartialEq)]
pub struct LkaParams<T = f32> {
    pub pointwise: ConvParams<T>,
    pub depthwise: ConvParams<T>,
    pub dilated: ConvParams<T>,
}

pub const LKA_KERNEL: usize = 5;
pub const LKA_DILATION: usize = 3;

impl<T: Scalar> LkaParams<T> {
    pub fn specs(channels: usize) -> [ConvSpec; 3] {
        [
            ConvSpec::pointwise(channels, channels),
            ConvSpec::depthwise(channels, LKA_KERNEL),
            ConvSpec::depthwise(channels, LKA_KERNEL).with_dilation(LKA_DILATION),
        ]
    }

    pub fn init<R: Rng>(init: &mut Initializer<'_, R>, prefix: &str, channels: usize) -> Self {
        let [pw, dw, dwd] = Self::specs(channels);
        LkaParams {
            pointwise: init.conv(&format!("{prefix}.pw"), pw),
            depthwise: init.conv(&format!("{prefix}.dw"), dw),
            dilated: init.conv(&format!("{prefix}.dwd"), dwd),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.pointwise.params();
        v.extend(self.depthwise.params());
        v.extend(self.dilated.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.pointwise.params_mut();
        v.extend(self.depthwise.params_mut());
        v.extend(self.dilated.params_mut());
        v
    }

    pub fn cast<U: Scalar>(&self) -> LkaParams<U> {
        LkaParams {
            pointwise: self.pointwise.cast(),
            depthwise: self.depthwise.cast(),
            dilated: self.dilated.cast(),
        }
    }

    pub(crate) fn layers(&self, out: &mut Vec<(String, ConvSpec)>) {
        self.pointwise.layers(out);
        self.depthwise.layers(out);
        self.dilated.layers(out);
    }
}

/// The attention map alone, before it multiplies the input.
pub fn lka_attention<T: Scalar, G: Graph<T>>(
    g: &mut G,
    f: &G::Value,
    p: &LkaParams<T>,
) -> Result<G::Value> {
    let a = p.pointwise.forward(g, f)?;
    let a = p.depthwise.forward(g, &a)?;
    p.dilated.forward(g, &a)
}

pub fn lka_forward<T: Scalar, G: Graph<T>>(g: &mut G, f: &G::Value, p: &LkaParams<T>) -> Result<G::Value> {
    let channels = g.value(f).shape().c;
    if channels != p.pointwise.spec.in_channels {
        return Err(mismatch("lka_forward", "channels", p.pointwise.spec.in_channels, channels));
    }
    let attn = lka_attention(g, f, p)?;
    g.mul(&attn, f)
}

/// Re-parameterizable blueprint shallow block.
///
/// Training topology: `F1 = pw(x) + x`, `F2 = dw3(F1) + dw1(F1) + F1`.
/// After fusion `dw1` is gone and `F2 = dw3'(pw'(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct RbsbParams<T = f32> {
    pub pointwise: ConvParams<T>,
    pub depthwise3: ConvParams<T>,
    pub depthwise1: Option<ConvParams<T>>,
}

impl<T: Scalar> RbsbParams<T> {
    pub fn train_specs(channels: usize) -> [ConvSpec; 3] {
        [
            ConvSpec::pointwise(channels, channels).with_bias(true),
            ConvSpec::depthwise(channels, 3).with_bias(true),
            ConvSpec::depthwise(channels, 1).with_bias(true),
        ]
    }

    pub fn init<R: Rng>(init: &mut Initializer<'_, R>, prefix: &str, channels: usize) -> Self {
        let [pw, dw3, dw1] = Self::train_specs(channels);
        RbsbParams {
            pointwise: init.conv(&format!("{prefix}.pw"), pw),
            depthwise3: init.conv(&format!("{prefix}.dw"), dw3),
            depthwise1: Some(init.conv(&format!("{prefix}.dw1"), dw1)),
        }
    }

    pub fn is_fused(&self) -> bool {
        self.depthwise1.is_none()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.pointwise.params();
        v.extend(self.depthwise3.params());
        if let Some(d) = &self.depthwise1 {
            v.extend(d.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.pointwise.params_mut();
        v.extend(self.depthwise3.params_mut());
        if let Some(d) = &mut self.depthwise1 {
            v.extend(d.params_mut());
        }
        v
    }

    pub fn cast<U: Scalar>(&self) -> RbsbParams<U> {
        RbsbParams {
            pointwise: self.pointwise.cast(),
            depthwise3: self.depthwise3.cast(),
            depthwise1: self.depthwise1.as_ref().map(ConvParams::cast),
        }
    }

    pub(crate) fn layers(&self, out: &mut Vec<(String, ConvSpec)>) {
        self.pointwise.layers(out);
        self.depthwise3.layers(out);
        if let Some(d) = &self.depthwise1 {
            d.layers(out);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RbsbMode {
    Train,
    Fused,
}

/// The linear part of an RBSB, before its GELU.
pub fn rbsb_pre_activation<T: Scalar, G: Graph<T>>(
    g: &mut G,
    x: &G::Value,
    p: &RbsbParams<T>,
    mode: RbsbMode,
) -> Result<G::Value> {
    match (mode, &p.depthwise1) {
        (RbsbMode::Train, Some(dw1)) => {
            let f1 = p.pointwise.forward(g, x)?;
            let f1 = g.add(&f1, x)?;
            let a = p.depthwise3.forward(g, &f1)?;
            let b = dw1.forward(g, &f1)?;
            let s = g.add(&a, &b)?;
            g.add(&s, &f1)
        }
        (RbsbMode::Fused, None) => {
            let f1 = p.pointwise.forward(g, x)?;
            p.depthwise3.forward(g, &f1)
        }
        (RbsbMode::Fused, Some(_)) => Err(Error::Usage(format!(
            "{}: fused forward requested before fusion",
            p.pointwise.name.trim_end_matches(".pw")
        ))),
        (RbsbMode::Train, None) => Err(Error::Usage(format!(
            "{}: training forward requested on fused parameters",
            p.pointwise.name.trim_end_matches(".pw")
        ))),
    }
}

pub fn rbsb_forward<T: Scalar, G: Graph<T>>(
    g: &mut G,
    x: &G::Value,
    p: &RbsbParams<T>,
    mode: RbsbMode,
) -> Result<G::Value> {
    let pre = rbsb_pre_activation(g, x, p, mode)?;
    g.gelu(&pre)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RefinementVariant {
    /// Blueprint shallow residual block: `GELU(bsconv(x) + x)`.
    Bsrb,
    /// Blueprint shallow block: `GELU(bsconv(x))`.
    Bsb,
    /// Re-parameterizable blueprint shallow block.
    Rbsb,
}

impl RefinementVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            RefinementVariant::Bsrb => "BSRB",
            RefinementVariant::Bsb => "BSB",
            RefinementVariant::Rbsb => "RBSB",
        }
    }
}

impl core::str::FromStr for RefinementVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BSRB" => Ok(RefinementVariant::Bsrb),
            "BSB" => Ok(RefinementVariant::Bsb),
            "RBSB" => Ok(RefinementVariant::Rbsb),
            _ => Err(Error::Config(format!("unknown refinement variant `{s}`"))),
        }
    }
}

/// A refinement layer `R_i` of the distillation block.
#[derive(Debug, Clone, PartialEq)]
pub enum RefinementBlock<T = f32> {
    Bsrb(BsConvParams<T>),
    Bsb(BsConvParams<T>),
    Rbsb(RbsbParams<T>),
}

impl<T: Scalar> RefinementBlock<T> {
    pub fn init<R: Rng>(
        init: &mut Initializer<'_, R>,
        prefix: &str,
        channels: usize,
        variant: RefinementVariant,
    ) -> Self {
        match variant {
            RefinementVariant::Bsrb => {
                RefinementBlock::Bsrb(BsConvParams::init(init, prefix, channels, channels, 3, false))
            }
            RefinementVariant::Bsb => {
                RefinementBlock::Bsb(BsConvParams::init(init, prefix, channels, channels, 3, false))
            }
            RefinementVariant::Rbsb => RefinementBlock::Rbsb(RbsbParams::init(init, prefix, channels)),
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            RefinementBlock::Bsrb(p) | RefinementBlock::Bsb(p) => p.pointwise.spec.in_channels,
            RefinementBlock::Rbsb(p) => p.pointwise.spec.in_channels,
        }
    }

    /// Linear part of the block, before its GELU.
    pub fn pre_activation<G: Graph<T>>(&self, g: &mut G, x: &G::Value) -> Result<G::Value> {
        match self {
            RefinementBlock::Bsrb(p) => {
                let y = bsconv_forward(g, x, p)?;
                g.add(&y, x)
            }
            RefinementBlock::Bsb(p) => bsconv_forward(g, x, p),
            RefinementBlock::Rbsb(p) => {
                let mode = if p.is_fused() {
                    RbsbMode::Fused
                } else {
                    RbsbMode::Train
                };
                rbsb_pre_activation(g, x, p, mode)
            }
        }
    }

    pub fn forward<G: Graph<T>>(&self, g: &mut G, x: &G::Value) -> Result<G::Value> {
        let pre = self.pre_activation(g, x)?;
        g.gelu(&pre)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            RefinementBlock::Bsrb(p) | RefinementBlock::Bsb(p) => p.params(),
            RefinementBlock::Rbsb(p) => p.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            RefinementBlock::Bsrb(p) | RefinementBlock::Bsb(p) => p.params_mut(),
            RefinementBlock::Rbsb(p) => p.params_mut(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> RefinementBlock<U> {
        match self {
            RefinementBlock::Bsrb(p) => RefinementBlock::Bsrb(p.cast()),
            RefinementBlock::Bsb(p) => RefinementBlock::Bsb(p.cast()),
            RefinementBlock::Rbsb(p) => RefinementBlock::Rbsb(p.cast()),
        }
    }

    pub(crate) fn layers(&self, out: &mut Vec<(String, ConvSpec)>) {
        match self {
            RefinementBlock::Bsrb(p) | RefinementBlock::Bsb(p) => p.layers(out),
            RefinementBlock::Rbsb(p) => p.layers(out),
        }
    }
}

/// Large kernel distillation block.
///
/// With `C` feature channels and `C_d = C / 2`:
/// three 1×1 distillation convs `C -> C_d`, three refinement blocks
/// `C -> C`, a final 3×3 BSConv `C -> C_d`, a 1×1 fusion `4·C_d -> A`,
/// LKA at width `A`, a 1×1 transform `A -> C`, pixel norm, and the skip.
#[derive(Debug, Clone, PartialEq)]
pub struct LkdbParams<T = f32> {
    pub distill: [ConvParams<T>; 3],
    pub refine: [RefinementBlock<T>; 3],
    pub distill_last: BsConvParams<T>,
    pub fusion: ConvParams<T>,
    pub lka: LkaParams<T>,
    pub transform: ConvParams<T>,
    pub norm_gamma: Param<T>,
    pub norm_beta: Param<T>,
}

pub(crate) fn check_lkdb_channels(channels: usize, attention: usize) -> Result<()> {
    if channels == 0 || !channels.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "distillation block needs an even positive channel count, got {channels}"
        )));
    }
    if attention == 0 {
        return Err(Error::Config("attention channels must be positive".into()));
    }
    Ok(())
}

impl<T: Scalar> LkdbParams<T> {
    pub fn init<R: Rng>(
        init: &mut Initializer<'_, R>,
        prefix: &str,
        channels: usize,
        attention: usize,
        variant: RefinementVariant,
    ) -> Result<Self> {
        check_lkdb_channels(channels, attention)?;
        let cd = channels / 2;
        let distill =
            [1, 2, 3].map(|i| init.conv(&format!("{prefix}.d{i}.conv"), ConvSpec::pointwise(channels, cd)));
        let refine = [1, 2, 3].map(|i| RefinementBlock::init(init, &format!("{prefix}.r{i}"), channels, variant));
        let distill_last = BsConvParams::init(init, &format!("{prefix}.d4"), channels, cd, 3, false);
        let fusion = init.conv(&format!("{prefix}.fuse.conv"), ConvSpec::pointwise(4 * cd, attention));
        let lka = LkaParams::init(init, &format!("{prefix}.lka"), attention);
        let transform = init.conv(&format!("{prefix}.trans.conv"), ConvSpec::pointwise(attention, channels));
        Ok(LkdbParams {
            distill,
            refine,
            distill_last,
            fusion,
            lka,
            transform,
            norm_gamma: Param::new(
                format!("{prefix}.norm.affine.weight"),
                Tensor::full(crate::Shape::new(channels, 1, 1, 1), T::one()),
            ),
            norm_beta: Param::new(
                format!("{prefix}.norm.affine.bias"),
                Tensor::zeros(crate::Shape::new(channels, 1, 1, 1)),
            ),
        })
    }

    pub fn channels(&self) -> usize {
        self.distill[0].spec.in_channels
    }

    pub fn attention_channels(&self) -> usize {
        self.lka.pointwise.spec.in_channels
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        for (d, r) in self.distill.iter().zip(&self.refine) {
            v.extend(d.params());
            v.extend(r.params());
        }
        v.extend(self.distill_last.params());
        v.extend(self.fusion.params());
        v.extend(self.lka.params());
        v.extend(self.transform.params());
        v.push(&self.norm_gamma);
        v.push(&self.norm_beta);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        for (d, r) in self.distill.iter_mut().zip(self.refine.iter_mut()) {
            v.extend(d.params_mut());
            v.extend(r.params_mut());
        }
        v.extend(self.distill_last.params_mut());
        v.extend(self.fusion.params_mut());
        v.extend(self.lka.params_mut());
        v.extend(self.transform.params_mut());
        v.push(&mut self.norm_gamma);
        v.push(&mut self.norm_beta);
        v
    }

    pub fn cast<U: Scalar>(&self) -> LkdbParams<U> {
        LkdbParams {
            distill: [0, 1, 2].map(|i| self.distill[i].cast()),
            refine: [0, 1, 2].map(|i| self.refine[i].cast()),
            distill_last: self.distill_last.cast(),
            fusion: self.fusion.cast(),
            lka: self.lka.cast(),
            transform: self.transform.cast(),
            norm_gamma: self.norm_gamma.cast(),
            norm_beta: self.norm_beta.cast(),
        }
    }

    /// Convolutions in execution order.
    pub fn layers(&self, out: &mut Vec<(String, ConvSpec)>) {
        for (d, r) in self.distill.iter().zip(&self.refine) {
            d.layers(out);
            r.layers(out);
        }
        self.distill_last.layers(out);
        self.fusion.layers(out);
        self.lka.layers(out);
        self.transform.layers(out);
    }
}

pub fn lkdb_forward<T: Scalar, G: Graph<T>>(g: &mut G, x: &G::Value, p: &LkdbParams<T>) -> Result<G::Value> {
    let c = p.channels();
    check_lkdb_channels(c, p.attention_channels())?;
    for d in &p.distill {
        if d.spec.out_channels != c / 2 {
            return Err(Error::Config(format!(
                "{}: distilled width {} must be half of {c}",
                d.name, d.spec.out_channels
            )));
        }
    }
    let found = g.value(x).shape().c;
    if found != c {
        return Err(mismatch("lkdb_forward", "channels", c, found));
    }

    let mut distilled = Vec::with_capacity(4);
    let mut refined = x.clone();
    for (d, r) in p.distill.iter().zip(&p.refine) {
        distilled.push(d.forward(g, &refined)?);
        refined = r.forward(g, &refined)?;
    }
    distilled.push(bsconv_forward(g, &refined, &p.distill_last)?);

    let parts: Vec<&G::Value> = distilled.iter().collect();
    let cat = g.concat(&parts)?;
    let fused = p.fusion.forward(g, &cat)?;
    let enhanced = lka_forward(g, &fused, &p.lka)?;
    let trans = p.transform.forward(g, &enhanced)?;
    let gamma = g.param(&p.norm_gamma);
    let beta = g.param(&p.norm_beta);
    let normed = g.pixel_norm(&trans, &gamma, &beta)?;
    g.add(&normed, x)
}
