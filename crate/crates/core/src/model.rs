//! Full network assembly and its exact cost accounting.
//!
//! The topology is a pure function of [`LkdnConfig`]:
//!
//! ```text
//! x ─ replicate n× ─ BSConv 3×3 ─ F0 ─ LKDB ─ F1 ─ LKDB ─ … ─ Fm
//!                                 │         └──────┬──────────┘
//!                                 │      concat ─ 1×1 ─ GELU ─ BSConv 3×3
//!                                 └────────────────── + ─ conv 3×3 ─ pixel shuffle
//! ```

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use crate::autodiff::Param;
pub use crate::blocks::RefinementVariant;
use crate::autodiff::{Eager, Graph};
use crate::blocks::{
    bsconv_forward, lkdb_forward, BsConvParams, ConvParams, Initializer, LkaParams, LkdbParams,
    RbsbParams,
};
use crate::error::{mismatch, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ConvSpec, Tensor};

/// Declarative description of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LkdnConfig {
    pub scale: usize,
    /// Number of distillation blocks `m`.
    pub num_blocks: usize,
    /// Feature width `C` (even).
    pub channels: usize,
    /// Attention width `A`.
    pub attention_channels: usize,
    /// How many copies of the RGB input are stacked before the first conv.
    pub input_replication: usize,
    pub refinement_variant: RefinementVariant,
    /// Train the reconstruction conv with a parallel 1×1 branch.
    pub upsampler_reparam: bool,
    /// Multi-branch structures have been collapsed for inference.
    pub fused: bool,
}

pub const DEFAULT_INPUT_REPLICATION: usize = 4;

/// Inputs smaller than this do not cover one attention receptive field.
pub const MIN_SPATIAL: usize = 17;

impl LkdnConfig {
    /// 8 blocks, 56 channels, trained with BSB.
    pub fn lkdn(scale: usize) -> Self {
        LkdnConfig {
            scale,
            num_blocks: 8,
            channels: 56,
            attention_channels: 56,
            input_replication: DEFAULT_INPUT_REPLICATION,
            refinement_variant: RefinementVariant::Bsb,
            upsampler_reparam: false,
            fused: false,
        }
    }

    /// 5 blocks, 42 channels, trained with RBSB and a re-parameterized upsampler.
    pub fn lkdn_s(scale: usize) -> Self {
        LkdnConfig {
            scale,
            num_blocks: 5,
            channels: 42,
            attention_channels: 42,
            input_replication: DEFAULT_INPUT_REPLICATION,
            refinement_variant: RefinementVariant::Rbsb,
            upsampler_reparam: true,
            fused: false,
        }
    }

    /// Desk-scale network for tests and smoke runs.
    pub fn tiny(scale: usize) -> Self {
        LkdnConfig {
            scale,
            num_blocks: 2,
            channels: 8,
            attention_channels: 8,
            input_replication: DEFAULT_INPUT_REPLICATION,
            refinement_variant: RefinementVariant::Bsb,
            upsampler_reparam: false,
            fused: false,
        }
    }

    pub fn preset(name: &str, scale: usize) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "lkdn" => Ok(Self::lkdn(scale)),
            "lkdn-s" | "lkdn_s" => Ok(Self::lkdn_s(scale)),
            "lkdn-tiny" | "tiny" => Ok(Self::tiny(scale)),
            _ => Err(Error::Config(format!("unknown preset `{name}`"))),
        }
    }

    /// The same network after re-parameterization.
    pub fn fused_config(&self) -> Self {
        LkdnConfig {
            fused: true,
            ..*self
        }
    }

    /// True if fusion would change anything for this config.
    pub fn has_fusable_layers(&self) -> bool {
        !self.fused && (self.refinement_variant == RefinementVariant::Rbsb || self.upsampler_reparam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.scale) {
            return Err(Error::Config(format!("scale must be 2, 3 or 4, got {}", self.scale)));
        }
        if self.num_blocks == 0 {
            return Err(Error::Config("num_blocks must be positive".into()));
        }
        if self.input_replication == 0 {
            return Err(Error::Config("input_replication must be positive".into()));
        }
        crate::blocks::check_lkdb_channels(self.channels, self.attention_channels)
    }

    /// Key-value pairs in a stable order, as written to config files and
    /// checkpoint manifests.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        alloc::vec![
            ("scale", format!("{}", self.scale)),
            ("num_blocks", format!("{}", self.num_blocks)),
            ("channels", format!("{}", self.channels)),
            ("attention_channels", format!("{}", self.attention_channels)),
            ("input_replication", format!("{}", self.input_replication)),
            ("refinement_variant", String::from(self.refinement_variant.as_str())),
            ("upsampler_reparam", format!("{}", self.upsampler_reparam)),
            ("fused", format!("{}", self.fused)),
        ]
    }

    /// Parses `key = value` pairs. A `preset` key seeds the defaults; other
    /// keys override it. Unknown keys are rejected.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let pairs: Vec<(&str, &str)> = pairs.into_iter().collect();
        let lookup = |key: &str| pairs.iter().rev().find(|(k, _)| *k == key).map(|(_, v)| *v);
        let scale = match lookup("scale") {
            Some(v) => parse_num(v, "scale")?,
            None => 4,
        };
        let mut cfg = match lookup("preset") {
            Some(p) => Self::preset(p, scale)?,
            None => Self::lkdn(scale),
        };
        for (key, value) in &pairs {
            match *key {
                "preset" | "scale" => {}
                "num_blocks" => cfg.num_blocks = parse_num(value, key)?,
                "channels" => cfg.channels = parse_num(value, key)?,
                "attention_channels" => cfg.attention_channels = parse_num(value, key)?,
                "input_replication" => cfg.input_replication = parse_num(value, key)?,
                "refinement_variant" => cfg.refinement_variant = value.parse()?,
                "upsampler_reparam" => cfg.upsampler_reparam = parse_bool(value, key)?,
                "fused" => cfg.fused = parse_bool(value, key)?,
                other => return Err(Error::Config(format!("unknown model key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn parse_num(v: &str, key: &str) -> Result<usize> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got `{v}`")))
}

pub(crate) fn parse_bool(v: &str, key: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got `{v}`"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv(ConvSpec),
    /// Pixel normalization with a per-channel affine.
    PixelNorm { channels: usize },
}

/// One parameterized layer of the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    fn conv(name: String, spec: ConvSpec) -> Self {
        LayerSpec {
            name,
            kind: LayerKind::Conv(spec),
        }
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            LayerKind::Conv(spec) => spec.param_count(),
            LayerKind::PixelNorm { channels } => 2 * channels,
        }
    }

    pub fn multadds(&self, out_h: usize, out_w: usize) -> u64 {
        match self.kind {
            LayerKind::Conv(spec) => spec.multadds(out_h, out_w),
            LayerKind::PixelNorm { .. } => 0,
        }
    }
}

fn reconstruction_channels(config: &LkdnConfig) -> usize {
    3 * config.scale * config.scale
}

/// Every parameterized layer in execution order.
pub fn layer_specs(config: &LkdnConfig) -> Result<Vec<LayerSpec>> {
    config.validate()?;
    let c = config.channels;
    let cd = c / 2;
    let a = config.attention_channels;
    let mut out = Vec::new();
    let push_all = |prefix: &str, stages: &[(&str, ConvSpec)], out: &mut Vec<LayerSpec>| {
        for (stage, spec) in stages {
            out.push(LayerSpec::conv(format!("{prefix}.{stage}"), *spec));
        }
    };

    let [pw, dw] = BsConvParams::<f32>::specs(3 * config.input_replication, c, 3, false);
    push_all("shallow", &[("pw", pw), ("dw", dw)], &mut out);

    for i in 0..config.num_blocks {
        let b = format!("block{i}");
        for j in 1..=3 {
            push_all(&format!("{b}.d{j}"), &[("conv", ConvSpec::pointwise(c, cd))], &mut out);
            let r = format!("{b}.r{j}");
            match (config.refinement_variant, config.fused) {
                (RefinementVariant::Rbsb, false) => {
                    let [pw, dw3, dw1] = RbsbParams::<f32>::train_specs(c);
                    push_all(&r, &[("pw", pw), ("dw", dw3), ("dw1", dw1)], &mut out);
                }
                (RefinementVariant::Rbsb, true) => {
                    let [pw, dw3, _] = RbsbParams::<f32>::train_specs(c);
                    push_all(&r, &[("pw", pw), ("dw", dw3)], &mut out);
                }
                _ => {
                    let [pw, dw] = BsConvParams::<f32>::specs(c, c, 3, false);
                    push_all(&r, &[("pw", pw), ("dw", dw)], &mut out);
                }
            }
        }
        let [pw, dw] = BsConvParams::<f32>::specs(c, cd, 3, false);
        push_all(&format!("{b}.d4"), &[("pw", pw), ("dw", dw)], &mut out);
        push_all(&format!("{b}.fuse"), &[("conv", ConvSpec::pointwise(4 * cd, a))], &mut out);
        let [pw, dw, dwd] = LkaParams::<f32>::specs(a);
        push_all(&format!("{b}.lka"), &[("pw", pw), ("dw", dw), ("dwd", dwd)], &mut out);
        push_all(&format!("{b}.trans"), &[("conv", ConvSpec::pointwise(a, c))], &mut out);
        out.push(LayerSpec {
            name: format!("{b}.norm"),
            kind: LayerKind::PixelNorm { channels: c },
        });
    }

    push_all(
        "fusion",
        &[("conv", ConvSpec::pointwise(config.num_blocks * c, c))],
        &mut out,
    );
    let [pw, dw] = BsConvParams::<f32>::specs(c, c, 3, false);
    push_all("smooth", &[("pw", pw), ("dw", dw)], &mut out);
    let rc = reconstruction_channels(config);
    push_all("recon", &[("conv", ConvSpec::dense(c, rc, 3))], &mut out);
    if config.upsampler_reparam && !config.fused {
        push_all("recon", &[("conv1", ConvSpec::pointwise(c, rc))], &mut out);
    }
    Ok(out)
}

/// Trainable scalars of the config's topology (train-mode branches included
/// unless the config is fused).
pub fn count_params(config: &LkdnConfig) -> Result<usize> {
    Ok(layer_specs(config)?.iter().map(LayerSpec::param_count).sum())
}

/// Multiply-accumulates of every convolution for one forward pass producing a
/// `gt_h × gt_w` image. The network runs at `(gt_h / scale) × (gt_w / scale)`,
/// rounded down.
pub fn count_multadds(config: &LkdnConfig, gt_h: usize, gt_w: usize) -> Result<u64> {
    let (h, w) = (gt_h / config.scale, gt_w / config.scale);
    if h == 0 || w == 0 {
        return Err(Error::Config(format!(
            "ground truth {gt_h}x{gt_w} smaller than scale {}",
            config.scale
        )));
    }
    Ok(layer_specs(config)?.iter().map(|l| l.multadds(h, w)).sum())
}

/// Receptive field of a chain of stride-1 convolutions along one axis.
pub fn chain_receptive_field(specs: &[ConvSpec]) -> usize {
    1 + specs.iter().map(|s| s.effective_kernel().0 - 1).sum::<usize>()
}

/// Receptive field of the attention map of one LKA stage.
pub fn lka_receptive_field() -> usize {
    chain_receptive_field(&LkaParams::<f32>::specs(1))
}

/// Receptive field of the whole network along its longest path, in LR pixels.
pub fn receptive_field(config: &LkdnConfig) -> Result<usize> {
    config.validate()?;
    let dw3 = ConvSpec::depthwise(1, 3);
    // shallow BSConv, then per block: three refinements, the last BSConv and LKA.
    let mut path = alloc::vec![dw3];
    for _ in 0..config.num_blocks {
        path.extend([dw3; 4]);
        path.extend(LkaParams::<f32>::specs(1));
    }
    path.push(dw3); // smoothing BSConv
    path.push(ConvSpec::dense(1, 1, 3)); // reconstruction
    Ok(chain_receptive_field(&path))
}

/// Network weights organized by topology.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub config: LkdnConfig,
    pub shallow: BsConvParams<T>,
    pub blocks: Vec<LkdbParams<T>>,
    pub fusion: ConvParams<T>,
    pub smooth: BsConvParams<T>,
    pub recon: ConvParams<T>,
    /// Parallel 1×1 branch of the reconstruction conv, present only while
    /// training a re-parameterized upsampler.
    pub recon_branch: Option<ConvParams<T>>,
}

impl<T: Scalar> Model<T> {
    /// Randomly initialized train-mode model.
    pub fn init(config: LkdnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.fused {
            return Err(Error::Config(
                "cannot initialize a fused model; initialize in train mode and fuse".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Initializer::new(&mut rng);
        let c = config.channels;
        let shallow = BsConvParams::init(&mut init, "shallow", 3 * config.input_replication, c, 3, false);
        let blocks = (0..config.num_blocks)
            .map(|i| {
                LkdbParams::init(
                    &mut init,
                    &format!("block{i}"),
                    c,
                    config.attention_channels,
                    config.refinement_variant,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let fusion = init.conv("fusion.conv", ConvSpec::pointwise(config.num_blocks * c, c));
        let smooth = BsConvParams::init(&mut init, "smooth", c, c, 3, false);
        let rc = reconstruction_channels(&config);
        let recon = init.conv("recon.conv", ConvSpec::dense(c, rc, 3));
        let recon_branch = config
            .upsampler_reparam
            .then(|| init.conv("recon.conv1", ConvSpec::pointwise(c, rc)));
        Ok(Model {
            config,
            shallow,
            blocks,
            fusion,
            smooth,
            recon,
            recon_branch,
        })
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.shallow.params();
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend(self.fusion.params());
        v.extend(self.smooth.params());
        v.extend(self.recon.params());
        if let Some(r) = &self.recon_branch {
            v.extend(r.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.shallow.params_mut();
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.fusion.params_mut());
        v.extend(self.smooth.params_mut());
        v.extend(self.recon.params_mut());
        if let Some(r) = &mut self.recon_branch {
            v.extend(r.params_mut());
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }

    /// Layer list recovered from the weights themselves.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut convs = Vec::new();
        self.shallow.layers(&mut convs);
        let mut out: Vec<LayerSpec> = convs.drain(..).map(|(n, s)| LayerSpec::conv(n, s)).collect();
        for b in &self.blocks {
            b.layers(&mut convs);
            out.extend(convs.drain(..).map(|(n, s)| LayerSpec::conv(n, s)));
            let name = b.norm_gamma.name.trim_end_matches(".affine.weight");
            out.push(LayerSpec {
                name: name.into(),
                kind: LayerKind::PixelNorm {
                    channels: b.channels(),
                },
            });
        }
        self.fusion.layers(&mut convs);
        self.smooth.layers(&mut convs);
        self.recon.layers(&mut convs);
        if let Some(r) = &self.recon_branch {
            r.layers(&mut convs);
        }
        out.extend(convs.drain(..).map(|(n, s)| LayerSpec::conv(n, s)));
        out
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config,
            shallow: self.shallow.cast(),
            blocks: self.blocks.iter().map(LkdbParams::cast).collect(),
            fusion: self.fusion.cast(),
            smooth: self.smooth.cast(),
            recon: self.recon.cast(),
            recon_branch: self.recon_branch.as_ref().map(ConvParams::cast),
        }
    }

    /// A model of `config` carrying `values`. Fused configs are accepted.
    pub fn from_params(config: LkdnConfig, values: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let mut model = Self::init(LkdnConfig { fused: false, ..config }, 0)?;
        if config.fused {
            model = crate::reparam::fuse_structure(&model)?;
        }
        model.load_params(values)?;
        Ok(model)
    }

    /// Overwrites every parameter from a name → tensor map. Every parameter
    /// must be present with its exact shape; extra names are rejected.
    pub fn load_params(&mut self, mut values: BTreeMap<String, Tensor<T>>) -> Result<()> {
        for p in self.params_mut() {
            let v = values
                .remove(&p.name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{}`", p.name)))?;
            if v.shape() != p.value.shape() {
                return Err(Error::Config(format!(
                    "parameter `{}` has shape {}, expected {}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
            p.value = v;
        }
        if let Some(extra) = values.keys().next() {
            return Err(Error::Config(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    /// Super-resolves a `(batch, 3, h, w)` image to `(batch, 3, h·s, w·s)`.
    pub fn forward<G: Graph<T>>(&self, g: &mut G, lr: &G::Value) -> Result<G::Value> {
        let s = g.value(lr).shape();
        if s.c != 3 {
            return Err(mismatch("Model::forward", "channels", 3, s.c));
        }
        if s.h < MIN_SPATIAL || s.w < MIN_SPATIAL {
            log::warn!(
                "input {}x{} is smaller than the {MIN_SPATIAL}x{MIN_SPATIAL} attention receptive field",
                s.h,
                s.w
            );
        }
        let replicated = if self.config.input_replication > 1 {
            let copies: Vec<&G::Value> = (0..self.config.input_replication).map(|_| lr).collect();
            g.concat(&copies)?
        } else {
            lr.clone()
        };
        let f0 = bsconv_forward(g, &replicated, &self.shallow)?;
        let mut feats = Vec::with_capacity(self.blocks.len());
        let mut f = f0.clone();
        for b in &self.blocks {
            f = lkdb_forward(g, &f, b)?;
            feats.push(f.clone());
        }
        let parts: Vec<&G::Value> = feats.iter().collect();
        let cat = g.concat(&parts)?;
        let fused = self.fusion.forward(g, &cat)?;
        let fused = g.gelu(&fused)?;
        let smoothed = bsconv_forward(g, &fused, &self.smooth)?;
        let residual = g.add(&smoothed, &f0)?;
        let mut up = self.recon.forward(g, &residual)?;
        if let Some(branch) = &self.recon_branch {
            let b = branch.forward(g, &residual)?;
            up = g.add(&up, &b)?;
        }
        g.pixel_shuffle(&up, self.config.scale)
    }

    /// Eager forward without recording.
    pub fn infer(&self, lr: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(&mut Eager, lr)
    }
}
