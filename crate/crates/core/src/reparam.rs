//! Structural re-parameterization.
//!
//! Two patterns are collapsed: the RBSB training block
//! (`pw + identity`, then `dw3 + dw1 + identity`) into a plain
//! pointwise/depthwise pair, and the reconstruction conv with its parallel
//! 1×1 branch into a single 3×3 conv. Each fused layer is certified by
//! comparing the old and new linear segments on random probes.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Eager;
use crate::blocks::{rbsb_pre_activation, ConvParams, RbsbMode, RbsbParams, RefinementBlock};
use crate::error::{mismatch, Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::{self, Shape, Tensor};

/// Number of random probes per fused layer.
pub const PROBE_COUNT: usize = 8;
pub const PROBE_SEED: u64 = 0;
/// Spatial side of per-layer feature probes.
pub const PROBE_SIZE: usize = 16;
/// Spatial side of end-to-end probe images.
pub const IMAGE_PROBE_SIZE: usize = 24;

/// Folds an identity skip into a square 1×1 convolution: `W' = W + I`.
pub fn fuse_pointwise_identity<T: Scalar>(
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let s = weight.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::Fusion(format!("identity needs a 1×1 kernel, got {}×{}", s.h, s.w)));
    }
    if s.n != s.c {
        return Err(Error::Fusion(format!("identity needs a square channel map, got {} -> {}", s.c, s.n)));
    }
    let mut fused = weight.clone();
    for c in 0..s.n {
        let v = fused.at(c, c, 0, 0);
        fused.set(c, c, 0, 0, v + T::one());
    }
    Ok((fused, bias.cloned()))
}

fn add_biases<T: Scalar>(a: Option<&Tensor<T>>, b: Option<&Tensor<T>>) -> Result<Option<Tensor<T>>> {
    Ok(match (a, b) {
        (Some(a), Some(b)) => Some(tensor::add(a, b)?),
        (Some(x), None) | (None, Some(x)) => Some(x.clone()),
        (None, None) => None,
    })
}

/// Merges a 3×3 depthwise kernel, a parallel 1×1 depthwise kernel and an
/// identity into one 3×3 depthwise kernel:
/// `K' = K3 + centerpad(K1) + centerpad(1)`, bias `b3 + b1`.
pub fn fuse_depthwise_branches<T: Scalar>(
    k3: &Tensor<T>,
    b3: Option<&Tensor<T>>,
    k1: &Tensor<T>,
    b1: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let (s3, s1) = (k3.shape(), k1.shape());
    if s3.c != 1 || s1.c != 1 || s1.h != 1 || s1.w != 1 || s3.h % 2 == 0 || s3.w % 2 == 0 {
        return Err(Error::Fusion(format!(
            "expected odd depthwise kernel and 1×1 depthwise kernel, got {s3} and {s1}"
        )));
    }
    if s3.n != s1.n {
        return Err(mismatch("fuse_depthwise_branches", "channels", s3.n, s1.n));
    }
    let (cy, cx) = (s3.h / 2, s3.w / 2);
    let mut fused = k3.clone();
    for c in 0..s3.n {
        let v = fused.at(c, 0, cy, cx) + k1.at(c, 0, 0, 0) + T::one();
        fused.set(c, 0, cy, cx, v);
    }
    Ok((fused, add_biases(b3, b1)?))
}

/// Adds a parallel 1×1 conv into the center tap of a wider conv with the same
/// channel map.
pub fn fuse_parallel_pointwise<T: Scalar>(main: &ConvParams<T>, branch: &ConvParams<T>) -> Result<ConvParams<T>> {
    let (m, b) = (main.spec, branch.spec);
    if b.kernel_h != 1 || b.kernel_w != 1 || m.kernel_h % 2 == 0 || m.kernel_w % 2 == 0 {
        return Err(Error::Fusion(format!(
            "{}: parallel branch must be 1×1 beside an odd kernel",
            main.name
        )));
    }
    if (m.in_channels, m.out_channels, m.groups) != (b.in_channels, b.out_channels, b.groups) {
        return Err(Error::Fusion(format!("{}: branch channel maps differ", main.name)));
    }
    let (cy, cx) = (m.kernel_h / 2, m.kernel_w / 2);
    let mut w = main.weight.value.clone();
    let bw = &branch.weight.value;
    for o in 0..m.out_channels {
        for i in 0..m.in_per_group() {
            let v = w.at(o, i, cy, cx) + bw.at(o, i, 0, 0);
            w.set(o, i, cy, cx, v);
        }
    }
    let bias = add_biases(
        main.bias.as_ref().map(|p| &p.value),
        branch.bias.as_ref().map(|p| &p.value),
    )?;
    let spec = m.with_bias(bias.is_some());
    ConvParams::from_tensors(&main.name, spec, w, bias)
}

/// Collapses a training-mode RBSB into its fused pointwise/depthwise pair.
pub fn fuse_rbsb<T: Scalar>(p: &RbsbParams<T>) -> Result<RbsbParams<T>> {
    let dw1 = p
        .depthwise1
        .as_ref()
        .ok_or_else(|| Error::Fusion(format!("{} is already fused", p.pointwise.name)))?;
    let (pw_w, pw_b) = fuse_pointwise_identity(&p.pointwise.weight.value, p.pointwise.bias.as_ref().map(|b| &b.value))?;
    let (dw_w, dw_b) = fuse_depthwise_branches(
        &p.depthwise3.weight.value,
        p.depthwise3.bias.as_ref().map(|b| &b.value),
        &dw1.weight.value,
        dw1.bias.as_ref().map(|b| &b.value),
    )?;
    let pw_spec = p.pointwise.spec.with_bias(pw_b.is_some());
    let dw_spec = p.depthwise3.spec.with_bias(dw_b.is_some());
    Ok(RbsbParams {
        pointwise: ConvParams::from_tensors(&p.pointwise.name, pw_spec, pw_w, pw_b)?,
        depthwise3: ConvParams::from_tensors(&p.depthwise3.name, dw_spec, dw_w, dw_b)?,
        depthwise1: None,
    })
}

/// One fused layer's certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionEntry {
    pub layer: String,
    pub max_deviation: f64,
    pub params_before: usize,
    pub params_after: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FusionReport {
    pub entries: Vec<FusionEntry>,
    /// Whole-network deviation on random images, when anything was fused.
    pub end_to_end_deviation: Option<f64>,
    pub probe_count: usize,
    pub probe_seed: u64,
}

impl FusionReport {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Largest deviation over all layers and the end-to-end check.
    pub fn max_deviation(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_deviation)
            .chain(self.end_to_end_deviation)
            .fold(0.0, f64::max)
    }

    pub fn params_before(&self) -> usize {
        self.entries.iter().map(|e| e.params_before).sum()
    }

    pub fn params_after(&self) -> usize {
        self.entries.iter().map(|e| e.params_after).sum()
    }
}

impl fmt::Display for FusionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.entries.iter().map(|e| e.layer.len()).chain([11]).max().unwrap_or(11);
        if self.entries.is_empty() {
            return write!(f, "no fusable layers");
        }
        writeln!(f, "{:<width$}  {:>12}  {:>13}  {:>12}", "layer", "deviation", "params_before", "params_after")?;
        for e in &self.entries {
            writeln!(
                f,
                "{:<width$}  {:>12.3e}  {:>13}  {:>12}",
                e.layer, e.max_deviation, e.params_before, e.params_after
            )?;
        }
        if let Some(d) = self.end_to_end_deviation {
            writeln!(
                f,
                "{:<width$}  {:>12.3e}  {:>13}  {:>12}",
                "end-to-end",
                d,
                self.params_before(),
                self.params_after()
            )?;
        }
        write!(
            f,
            "max deviation {:.3e} over {} probes (seed {})",
            self.max_deviation(),
            self.probe_count,
            self.probe_seed
        )
    }
}

fn random_probe<T: Scalar>(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_, _, _, _| T::from_f64(rng.gen_range(lo..hi)))
}

fn probe_deviation<T: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: Shape,
    lo: f64,
    hi: f64,
    mut compare: impl FnMut(&Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)>,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..PROBE_COUNT {
        let x = random_probe(rng, shape, lo, hi);
        let (a, b) = compare(&x)?;
        worst = worst.max(a.max_abs_diff(&b)?.as_f64());
    }
    Ok(worst)
}

/// Fuses `model` without probing equivalence.
pub fn fuse_structure<T: Scalar>(model: &Model<T>) -> Result<Model<T>> {
    let mut fused = model.clone();
    for block in &mut fused.blocks {
        for r in &mut block.refine {
            if let RefinementBlock::Rbsb(p) = r {
                if !p.is_fused() {
                    *p = fuse_rbsb(p)?;
                }
            }
        }
    }
    if let Some(branch) = fused.recon_branch.take() {
        fused.recon = fuse_parallel_pointwise(&fused.recon, &branch)?;
    }
    fused.config = model.config.fused_config();
    Ok(fused)
}

/// Fuses every fusable structure of `model`.
///
/// Models with nothing to fuse (BSB/BSRB without an upsampler branch, or
/// already fused) are returned unchanged with an empty report.
pub fn fuse_model<T: Scalar>(model: &Model<T>) -> Result<(Model<T>, FusionReport)> {
    let mut report = FusionReport {
        probe_count: PROBE_COUNT,
        probe_seed: PROBE_SEED,
        ..FusionReport::default()
    };
    if !model.config.has_fusable_layers() {
        return Ok((model.clone(), report));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED);
    let mut fused = model.clone();
    let c = model.config.channels;
    let feature = Shape::new(1, c, PROBE_SIZE, PROBE_SIZE);

    for block in &mut fused.blocks {
        for r in &mut block.refine {
            let RefinementBlock::Rbsb(train) = r else {
                continue;
            };
            if train.is_fused() {
                continue;
            }
            let merged = fuse_rbsb(train)?;
            let deviation = probe_deviation(&mut rng, feature, -1.0, 1.0, |x| {
                Ok((
                    rbsb_pre_activation(&mut Eager, x, train, RbsbMode::Train)?,
                    rbsb_pre_activation(&mut Eager, x, &merged, RbsbMode::Fused)?,
                ))
            })?;
            let count = |p: &RbsbParams<T>| p.params().iter().map(|q| q.value.numel()).sum();
            report.entries.push(FusionEntry {
                layer: String::from(train.pointwise.name.trim_end_matches(".pw")),
                max_deviation: deviation,
                params_before: count(train),
                params_after: count(&merged),
            });
            *train = merged;
        }
    }

    if let Some(branch) = fused.recon_branch.take() {
        let merged = fuse_parallel_pointwise(&fused.recon, &branch)?;
        let deviation = probe_deviation(&mut rng, feature, -1.0, 1.0, |x| {
            let a = fused.recon.forward(&mut Eager, x)?;
            let b = branch.forward(&mut Eager, x)?;
            Ok((tensor::add(&a, &b)?, merged.forward(&mut Eager, x)?))
        })?;
        report.entries.push(FusionEntry {
            layer: String::from("recon"),
            max_deviation: deviation,
            params_before: fused.recon.param_count() + branch.param_count(),
            params_after: merged.param_count(),
        });
        fused.recon = merged;
    }
    fused.config = model.config.fused_config();

    let image = Shape::new(1, 3, IMAGE_PROBE_SIZE, IMAGE_PROBE_SIZE);
    report.end_to_end_deviation = Some(probe_deviation(&mut rng, image, 0.0, 1.0, |x| {
        Ok((model.infer(x)?, fused.infer(x)?))
    })?);
    Ok((fused, report))
}
