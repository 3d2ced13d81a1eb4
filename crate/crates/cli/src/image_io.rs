//! PNG boundary: 8-bit RGB or grayscale in, 8-bit RGB out.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use lkdn_core::data::Image;
use png::{BitDepth, ColorType, Transformations};

use crate::error::{CliError, Result};

/// Decodes an 8-bit PNG. Grayscale is replicated to three channels, palettes
/// are expanded and alpha is dropped.
pub fn load_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| CliError::input(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(Transformations::EXPAND);
    let bad = |e: png::DecodingError| CliError::format(path, e.to_string());
    let mut reader = decoder.read_info().map_err(bad)?;
    let (color, depth) = reader.output_color_type();
    if depth != BitDepth::Eight {
        return Err(CliError::format(
            path,
            format!("unsupported bit depth {depth:?}; only 8-bit PNGs are accepted"),
        ));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| CliError::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = info.line_size;
    let channels = match color {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(CliError::format(path, "palette was not expanded")),
    };
    let image = Image::from_fn(h, w, |y, x| {
        let p = &buf[y * stride + x * channels..];
        if channels < 3 {
            [p[0]; 3]
        } else {
            [p[0], p[1], p[2]]
        }
    });
    Ok(image)
}

pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::output(path, e))?;
    let mut out = BufWriter::new(file);
    let mut encoder = png::Encoder::new(&mut out, image.width() as u32, image.height() as u32);
    encoder.set_color(ColorType::Rgb);
    encoder.set_depth(BitDepth::Eight);
    let encode = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => CliError::output(path, io),
        other => CliError::format(path, other.to_string()),
    };
    let mut writer = encoder.write_header().map_err(encode)?;
    writer.write_image_data(image.data()).map_err(encode)?;
    writer.finish().map_err(encode)?;
    out.flush().map_err(|e| CliError::output(path, e))
}

/// PNG files directly inside `dir`, sorted by file name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::input(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::input(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// File name without its extension, for result tables and LR naming.
pub fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}
