//! Conversion of images and conditioning packs into model tensors.

use candle_core::{Device, Tensor};

use geocond::{ConditioningPack, Image};

use crate::error::{DiffusionError, Result};
use crate::model::DenoiserConfig;

/// Conditioning channels `(B, C, H, W)` and log-density levels `(B, 1, N)`.
pub struct CondTensors {
    pub cond: Tensor,
    pub log_density: Vec<Tensor>,
}

/// All packs must share one size.
pub fn cond_tensors(packs: &[&ConditioningPack], config: &DenoiserConfig) -> Result<CondTensors> {
    let first = packs.first().ok_or_else(|| DiffusionError::Shape("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let levels = config.levels_for(h, w);
    for p in packs {
        p.check(config.mode, (h, w), &levels)?;
    }
    let b = packs.len();
    let c = config.cond_channels();
    let cond: Vec<f32> = packs.iter().flat_map(|p| p.channels.iter().map(|&v| v as f32)).collect();
    let cond = Tensor::from_vec(cond, (b, c, h, w), &Device::Cpu)?;
    let log_density = levels
        .iter()
        .enumerate()
        .map(|(l, (h, w))| {
            let data: Vec<f32> = packs
                .iter()
                .flat_map(|p| p.log_density[l].values.iter().map(|&v| v as f32))
                .collect();
            Ok(Tensor::from_vec(data, (b, 1, h * w), &Device::Cpu)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CondTensors { cond, log_density })
}

/// Planar `[-1, 1]` data of an image with intensities in `[0, 1]`.
pub fn image_to_model(img: &Image, config: &DenoiserConfig) -> Result<Vec<f32>> {
    let (r, c) = (config.resolution, config.image_channels);
    if (img.height(), img.width(), img.channels()) != (r, r, c) {
        return Err(DiffusionError::Shape(format!(
            "image {}x{}x{} but model expects {r}x{r}x{c}",
            img.height(),
            img.width(),
            img.channels()
        )));
    }
    let mut out = vec![0.0f32; r * r * c];
    for (i, px) in img.data().chunks(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            out[ch * r * r + i] = (2.0 * v - 1.0) as f32;
        }
    }
    Ok(out)
}

/// Inverse of [`image_to_model`] for a `height x width x channels` plane
/// stack, clamping to `[0, 1]`.
pub fn model_to_image(planar: &[f32], height: usize, width: usize, channels: usize) -> Result<Image> {
    let n = height * width;
    if planar.len() != n * channels {
        return Err(DiffusionError::Shape(format!(
            "{} values for a {height}x{width}x{channels} image",
            planar.len()
        )));
    }
    let mut data = vec![0.0f64; n * channels];
    for ch in 0..channels {
        for i in 0..n {
            data[i * channels + ch] = ((planar[ch * n + i] as f64 + 1.0) / 2.0).clamp(0.0, 1.0);
        }
    }
    Ok(Image::from_vec(height, width, channels, data)?)
}
