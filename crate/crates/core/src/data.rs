//! Images, degradation, patch sampling and the Y-channel quality metrics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{mismatch, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// 8-bit RGB image, row-major and channel-interleaved.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config(format!("image dimensions must be positive, got {height}x{width}")));
        }
        if data.len() != 3 * height * width {
            return Err(mismatch("Image::new", "payload length", 3 * height * width, data.len()));
        }
        Ok(Image { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Image { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// One channel as floats on the 0–255 scale.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).map(|&v| v as f64).collect()
    }

    fn from_planes(height: usize, width: usize, planes: &[Vec<f64>; 3]) -> Self {
        Image::from_fn(height, width, |y, x| {
            let i = y * width + x;
            [0, 1, 2].map(|c| quantize_255(planes[c][i]))
        })
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if h == 0 || w == 0 || y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Config(format!(
                "crop {h}x{w} at ({y0},{x0}) outside {}x{} image",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(h, w, |y, x| self.pixel(y0 + y, x0 + x)))
    }

    pub fn hflip(&self) -> Image {
        Image::from_fn(self.height, self.width, |y, x| self.pixel(y, self.width - 1 - x))
    }

    /// Quarter turn clockwise.
    pub fn rot90(&self) -> Image {
        Image::from_fn(self.width, self.height, |y, x| self.pixel(self.height - 1 - x, y))
    }

    /// `(1, 3, h, w)` tensor with values in `[0, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        images_to_tensor(core::slice::from_ref(self)).expect("single image")
    }

    /// Converts batch item `n` of a `(batch, 3, h, w)` tensor, clamping to
    /// `[0, 1]` and rounding half away from zero.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<Image> {
        let s = t.shape();
        if s.c != 3 {
            return Err(mismatch("Image::from_tensor", "channels", 3, s.c));
        }
        if n >= s.n {
            return Err(mismatch("Image::from_tensor", "batch index", s.n, n));
        }
        Ok(Image::from_fn(s.h, s.w, |y, x| {
            [0, 1, 2].map(|c| quantize_unit(t.at(n, c, y, x).as_f64()))
        }))
    }
}

/// `[0, 1]` float to 8 bits: clamp, scale, round half away from zero.
pub fn quantize_unit(v: f64) -> u8 {
    quantize_255(v * 255.0)
}

fn quantize_255(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    libm::round(v.clamp(0.0, 255.0)) as u8
}

/// Stacks equally sized images into a `(batch, 3, h, w)` tensor in `[0, 1]`.
pub fn images_to_tensor<T: Scalar>(images: &[Image]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Usage("cannot batch zero images".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::Usage(format!(
                "batch mixes {h}x{w} and {}x{} images",
                img.height, img.width
            )));
        }
        for c in 0..3 {
            data.extend(img.data.iter().skip(c).step_by(3).map(|&v| T::from_f64(v as f64 / 255.0)));
        }
    }
    Tensor::new(Shape::new(images.len(), 3, h, w), data)
}

/// BT.601 limited-range luma of normalized RGB, on the 0–255 scale.
pub fn luma(r: f64, g: f64, b: f64) -> f64 {
    16.0 + 65.481 * r + 128.553 * g + 24.966 * b
}

/// Y plane of an image, row-major, on the 0–255 scale.
pub fn rgb_to_y(image: &Image) -> Vec<f64> {
    image
        .data
        .chunks_exact(3)
        .map(|p| luma(p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0))
        .collect()
}

/// Keys cubic kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Source taps and normalized weights for each output index of a 1-D resize.
///
/// Output pixel `i` maps to source coordinate `(i + 0.5) / ratio - 0.5`.
/// When shrinking, the kernel is stretched by `1 / ratio`. Taps falling
/// outside the source are clamped to the nearest edge.
pub fn resize_weights(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = out_len as f64 / in_len as f64;
    let (stretch, support) = if ratio < 1.0 { (ratio, 2.0 / ratio) } else { (1.0, 2.0) };
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) / ratio - 0.5;
            let lo = libm::floor(center - support) as i64;
            let hi = libm::ceil(center + support) as i64;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for j in lo..=hi {
                let w = stretch * cubic(stretch * (center - j as f64));
                if w == 0.0 {
                    continue;
                }
                let src = j.clamp(0, in_len as i64 - 1) as usize;
                match taps.iter_mut().find(|(s, _)| *s == src) {
                    Some(t) => t.1 += w,
                    None => taps.push((src, w)),
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Separable bicubic resize of one row-major float plane.
pub fn resize_plane(plane: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let rows = resize_weights(h, out_h);
    let cols = resize_weights(w, out_w);
    let mut tmp = vec![0.0; out_h * w];
    for (oy, taps) in rows.iter().enumerate() {
        for &(sy, wt) in taps {
            let src = &plane[sy * w..(sy + 1) * w];
            for (d, &s) in tmp[oy * w..(oy + 1) * w].iter_mut().zip(src) {
                *d += wt * s;
            }
        }
    }
    let mut out = vec![0.0; out_h * out_w];
    for oy in 0..out_h {
        let row = &tmp[oy * w..(oy + 1) * w];
        for (ox, taps) in cols.iter().enumerate() {
            out[oy * out_w + ox] = taps.iter().map(|&(sx, wt)| wt * row[sx]).sum();
        }
    }
    out
}

/// Bicubic resize with antialiasing on downscale, rounded back to 8 bits.
pub fn bicubic_resize(image: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config(format!("resize target {out_h}x{out_w} must be positive")));
    }
    if (out_h, out_w) == (image.height, image.width) {
        return Ok(image.clone());
    }
    let planes = [0, 1, 2].map(|c| resize_plane(&image.plane(c), image.height, image.width, out_h, out_w));
    Ok(Image::from_planes(out_h, out_w, &planes))
}

/// Trims the bottom and right so both sides divide by `scale`.
pub fn modcrop(image: &Image, scale: usize) -> Result<Image> {
    let (h, w) = (image.height - image.height % scale, image.width - image.width % scale);
    image.crop(0, 0, h, w)
}

/// Bicubic LR counterpart of an HR image (after modcrop).
pub fn degrade(hr: &Image, scale: usize) -> Result<Image> {
    if scale == 0 || hr.height < scale || hr.width < scale {
        return Err(Error::Config(format!(
            "cannot downscale {}x{} by {scale}",
            hr.height, hr.width
        )));
    }
    bicubic_resize(hr, hr.height / scale, hr.width / scale)
}

/// Aligned LR/HR training crops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPair {
    pub lr: Image,
    pub hr: Image,
    /// Top-left corner of the LR patch in LR coordinates.
    pub lr_origin: (usize, usize),
    /// Top-left corner of the HR patch; always `lr_origin · scale`.
    pub hr_origin: (usize, usize),
}

/// Crops a random `lr_patch·scale` HR square at an LR-aligned origin and
/// produces the LR side by downscaling that crop.
pub fn sample_patch_pair<R: Rng>(hr: &Image, scale: usize, lr_patch: usize, rng: &mut R) -> Result<PatchPair> {
    let side = lr_patch * scale;
    if lr_patch == 0 || scale == 0 || hr.height < side || hr.width < side {
        return Err(Error::Config(format!(
            "image {}x{} too small for a {lr_patch}px LR patch at scale {scale}",
            hr.height, hr.width
        )));
    }
    let ly = rng.gen_range(0..=hr.height / scale - lr_patch);
    let lx = rng.gen_range(0..=hr.width / scale - lr_patch);
    let hr_patch = hr.crop(ly * scale, lx * scale, side, side)?;
    let lr = bicubic_resize(&hr_patch, lr_patch, lr_patch)?;
    Ok(PatchPair {
        lr,
        hr: hr_patch,
        lr_origin: (ly, lx),
        hr_origin: (ly * scale, lx * scale),
    })
}

/// An element of the dihedral group: optional horizontal flip followed by
/// `rot90` clockwise quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Augment {
    pub hflip: bool,
    pub rot90: u8,
}

impl Augment {
    pub const IDENTITY: Augment = Augment {
        hflip: false,
        rot90: 0,
    };

    pub fn all() -> [Augment; 8] {
        core::array::from_fn(|i| Augment {
            hflip: i >= 4,
            rot90: (i % 4) as u8,
        })
    }

    pub fn random<R: Rng>(rng: &mut R) -> Self {
        Self::all()[rng.gen_range(0..8)]
    }

    pub fn apply(&self, image: &Image) -> Image {
        let mut out = if self.hflip { image.hflip() } else { image.clone() };
        for _ in 0..self.rot90 % 4 {
            out = out.rot90();
        }
        out
    }
}

/// Applies the same transform to both sides of a pair.
pub fn augment(pair: &PatchPair, flags: Augment) -> PatchPair {
    PatchPair {
        lr: flags.apply(&pair.lr),
        hr: flags.apply(&pair.hr),
        lr_origin: pair.lr_origin,
        hr_origin: pair.hr_origin,
    }
}

/// Y planes of both images with `border` pixels removed from every side.
fn shaved_y(a: &Image, b: &Image, border: usize) -> Result<(Vec<f64>, Vec<f64>, usize, usize)> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Usage(format!(
            "metric on {}x{} vs {}x{} images",
            a.height, a.width, b.height, b.width
        )));
    }
    if a.height <= 2 * border || a.width <= 2 * border {
        return Err(Error::Usage(format!(
            "{}x{} image has nothing left after a {border}px shave",
            a.height, a.width
        )));
    }
    let (h, w) = (a.height - 2 * border, a.width - 2 * border);
    let cut = |img: &Image| {
        let y = rgb_to_y(img);
        let mut out = Vec::with_capacity(h * w);
        for r in border..border + h {
            out.extend_from_slice(&y[r * img.width + border..r * img.width + border + w]);
        }
        out
    };
    Ok((cut(a), cut(b), h, w))
}

/// Y-channel PSNR in dB after shaving `scale` pixels per side; `+inf` for
/// identical images.
pub fn psnr(sr: &Image, hr: &Image, scale: usize) -> Result<f64> {
    let (a, b, _, _) = shaved_y(sr, hr, scale)?;
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * libm::log10(255.0 * 255.0 / mse))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g = core::array::from_fn(|i| {
        let d = i as f64 - r;
        libm::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    });
    let total: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= total);
    g
}

/// Separable Gaussian filter keeping only fully covered positions.
fn filter_valid(p: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..k).map(|i| g[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM on the Y channel after shaving `scale` pixels per side, with an
/// 11×11 Gaussian window (σ = 1.5), `K1 = 0.01`, `K2 = 0.03`, `L = 255`.
pub fn ssim(sr: &Image, hr: &Image, scale: usize) -> Result<f64> {
    let (a, b, h, w) = shaved_y(sr, hr, scale)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Usage(format!(
            "{h}x{w} shaved image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let c1 = (0.01 * 255.0) * (0.01 * 255.0);
    let c2 = (0.03 * 255.0) * (0.03 * 255.0);
    let g = gaussian_window();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(&a, h, w, &g);
    let mu_b = filter_valid(&b, h, w, &g);
    let s_aa = filter_valid(&prod(&a, &a), h, w, &g);
    let s_bb = filter_valid(&prod(&b, &b), h, w, &g);
    let s_ab = filter_valid(&prod(&a, &b), h, w, &g);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = s_aa[i] - ma * ma;
        let vb = s_bb[i] - mb * mb;
        let cov = s_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Procedural test image: a smooth color gradient overlaid with random
/// rectangles, discs and stripe patches, so it has both flat regions and
/// sharp edges at several orientations.
pub fn synthetic_image<R: Rng>(height: usize, width: usize, rng: &mut R) -> Image {
    let mut planes = [0usize; 3].map(|_| vec![0.0f64; height * width]);
    let base: [[f64; 3]; 3] = core::array::from_fn(|_| core::array::from_fn(|_| rng.gen_range(40.0..215.0)));
    let (hf, wf) = (height as f64, width as f64);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = (y as f64 / hf, x as f64 / wf);
            for c in 0..3 {
                planes[c][y * width + x] = base[0][c] * (1.0 - u) * (1.0 - v) + base[1][c] * u + base[2][c] * v * (1.0 - u);
            }
        }
    }
    let shapes = rng.gen_range(6..12);
    for _ in 0..shapes {
        let color: [f64; 3] = core::array::from_fn(|_| rng.gen_range(0.0..255.0));
        let cy = rng.gen_range(0.0..hf);
        let cx = rng.gen_range(0.0..wf);
        let r = rng.gen_range(0.05..0.3) * hf.min(wf);
        let kind = rng.gen_range(0..3);
        let angle = rng.gen_range(0.0..core::f64::consts::PI);
        let period = rng.gen_range(3.0..9.0);
        let (sa, ca) = (libm::sin(angle), libm::cos(angle));
        for y in 0..height {
            for x in 0..width {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let inside = match kind {
                    0 => dy.abs() < r && dx.abs() < 0.6 * r,
                    1 => dy * dy + dx * dx < r * r,
                    _ => {
                        let along = dx * ca + dy * sa;
                        dy * dy + dx * dx < r * r && libm::fmod(along.abs(), period) < period / 2.0
                    }
                };
                if inside {
                    for c in 0..3 {
                        planes[c][y * width + x] = color[c];
                    }
                }
            }
        }
    }
    Image::from_planes(height, width, &planes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn y_anchors() {
        assert!((luma(1.0, 1.0, 1.0) - 235.0).abs() < 1e-12);
        assert_eq!(luma(0.0, 0.0, 0.0), 16.0);
        assert!((luma(1.0, 0.0, 0.0) - 81.481).abs() < 1e-12);
    }

    #[test]
    fn quantization_rounds_half_away_from_zero() {
        assert_eq!(quantize_255(2.5), 3);
        assert_eq!(quantize_255(2.4999), 2);
        assert_eq!(quantize_unit(-0.3), 0);
        assert_eq!(quantize_unit(1.7), 255);
    }

    #[test]
    fn rotation_maps_corners() {
        let img = Image::from_fn(2, 3, |y, x| [(y * 3 + x) as u8, 0, 0]);
        let r = img.rot90();
        assert_eq!((r.height(), r.width()), (3, 2));
        assert_eq!(r.pixel(0, 0), img.pixel(1, 0));
        assert_eq!(r.pixel(0, 1), img.pixel(0, 0));
    }
}
