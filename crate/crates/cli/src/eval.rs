//! Dataset evaluation: Y-channel PSNR and SSIM per image and on average.

use std::fmt;
use std::path::{Path, PathBuf};

use lkdn_core::data::{self, Image};
use lkdn_core::Model;
use rayon::prelude::*;

use crate::error::{CliError, Result};
use crate::image_io;

/// How SR images are produced from LR inputs.
#[derive(Debug, Clone, Copy)]
pub enum Upscaler<'a> {
    Model(&'a Model),
    Bicubic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTable {
    pub scale: usize,
    /// Sorted by image name.
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    pub fn mean_psnr(&self) -> f64 {
        self.rows.iter().map(|r| r.psnr).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.rows.iter().map(|r| r.ssim).sum::<f64>() / self.rows.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,psnr_y,ssim_y\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.4},{:.6}\n", r.name, r.psnr, r.ssim));
        }
        out.push_str(&format!("mean,{:.4},{:.6}\n", self.mean_psnr(), self.mean_ssim()));
        out
    }
}

impl fmt::Display for EvalTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.name.len()).chain([5]).max().unwrap_or(5);
        writeln!(f, "{:<width$}  {:>9}  {:>7}", "image", "PSNR(dB)", "SSIM")?;
        for r in &self.rows {
            writeln!(f, "{:<width$}  {:>9.2}  {:>7.4}", r.name, r.psnr, r.ssim)?;
        }
        write!(
            f,
            "{:<width$}  {:>9.2}  {:>7.4}   (x{}, Y channel)",
            "mean",
            self.mean_psnr(),
            self.mean_ssim(),
            self.scale
        )
    }
}

/// LR counterpart of `hr_path`: `<dir>/LR/<stem>x<scale>.png` when present,
/// otherwise the bicubic degradation of the mod-cropped HR image.
pub fn lr_for(hr_path: &Path, hr: &Image, scale: usize) -> Result<Image> {
    let lr_path = lr_path_for(hr_path, scale);
    if lr_path.is_file() {
        let lr = image_io::load_png(&lr_path)?;
        if lr.height() * scale != hr.height() || lr.width() * scale != hr.width() {
            return Err(CliError::format(
                &lr_path,
                format!(
                    "LR image is {}x{}, expected {}x{} for scale {scale}",
                    lr.height(),
                    lr.width(),
                    hr.height() / scale,
                    hr.width() / scale
                ),
            ));
        }
        return Ok(lr);
    }
    Ok(data::degrade(hr, scale)?)
}

fn lr_path_for(hr_path: &Path, scale: usize) -> PathBuf {
    let dir = hr_path.parent().unwrap_or(Path::new("."));
    dir.join("LR").join(format!("{}x{scale}.png", image_io::stem(hr_path)))
}

/// Evaluates every PNG directly inside `dir`.
pub fn evaluate_dir(dir: &Path, scale: usize, upscaler: Upscaler<'_>) -> Result<EvalTable> {
    if let Upscaler::Model(m) = upscaler {
        if m.config.scale != scale {
            return Err(CliError::usage(format!(
                "checkpoint is a x{} model but --scale is {scale}",
                m.config.scale
            )));
        }
    }
    let files = image_io::list_pngs(dir)?;
    if files.is_empty() {
        return Err(CliError::usage(format!("no PNG images in {}", dir.display())));
    }
    let rows = files
        .par_iter()
        .map(|path| -> Result<EvalRow> {
            let hr = data::modcrop(&image_io::load_png(path)?, scale)?;
            let lr = lr_for(path, &hr, scale)?;
            let sr = match upscaler {
                Upscaler::Model(m) => Image::from_tensor(&m.infer(&lr.to_tensor())?, 0)?,
                Upscaler::Bicubic => data::bicubic_resize(&lr, hr.height(), hr.width())?,
            };
            Ok(EvalRow {
                name: image_io::stem(path),
                psnr: data::psnr(&sr, &hr, scale)?,
                ssim: data::ssim(&sr, &hr, scale)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalTable { scale, rows })
}
