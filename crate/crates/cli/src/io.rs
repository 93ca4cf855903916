//! PNG exchange and field-file access with paths in error messages.

use std::path::Path;

use geocond::{Coverage, FieldFile, Image};
use image::{DynamicImage, GrayImage, ImageError, RgbImage};

use crate::error::{CliError, Result};

/// Reads an 8-bit PNG. Grayscale files give one channel, everything else
/// is converted to RGB.
pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| match e {
        ImageError::IoError(io) => CliError::Io(format!("{}: {io}", path.display())),
        other => CliError::validation(format!("{}: {other}", path.display())),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, bytes) = match img {
        DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLumaA16(_) => {
            (1, img.to_luma8().into_raw())
        }
        other => (3, other.to_rgb8().into_raw()),
    };
    let data = bytes.into_iter().map(|b| b as f64 / 255.0).collect();
    Ok(Image::from_vec(h, w, channels, data)?)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let res = match img.channels() {
        1 => GrayImage::from_raw(w, h, bytes).map(|g| g.save(path)),
        3 => RgbImage::from_raw(w, h, bytes).map(|g| g.save(path)),
        c => {
            return Err(CliError::validation(format!(
                "{}: cannot write a {c}-channel image as PNG",
                path.display()
            )))
        }
    };
    match res {
        Some(Ok(())) => Ok(()),
        Some(Err(e)) => Err(CliError::Io(format!("{}: {e}", path.display()))),
        None => Err(CliError::validation("image buffer size mismatch")),
    }
}

/// Coverage as a black/white PNG.
pub fn write_mask(mask: &Coverage, path: &Path) -> Result<()> {
    let img = Image::from_fn(mask.height, mask.width, |x, y| if mask.is_covered(x, y) { 1.0 } else { 0.0 })?;
    write_png(&img, path)
}

pub fn load_field(path: &Path) -> Result<FieldFile> {
    FieldFile::load(path).map_err(|e| match e {
        geocond::Error::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
        other => CliError::validation(format!("{}: {other}", path.display())),
    })
}

pub fn save_field(file: &FieldFile, path: &Path) -> Result<()> {
    file.save(path).map_err(|e| match e {
        geocond::Error::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
        other => CliError::validation(format!("{}: {other}", path.display())),
    })
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
