//! Equirectangular (polar) parametrization of the unit sphere.
//!
//! The vertical image axis carries the polar angle `theta = pi h / H` and the
//! horizontal axis the azimuth `alpha = 2 pi w / W`. Row 0 is the north pole.
//! The metric in these coordinates is `ds^2 = dtheta^2 + sin^2(theta) dalpha^2`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use crate::differential::{clamp_density, DensityMap, MetricField, MetricSample};
use crate::error::{Error, Result};
use crate::grid::{check_dims, NormalizedPoint, WarpField};

/// Default share of the width overwritten by [`seam_blend`].
pub const DEFAULT_SEAM_FRACTION: f64 = 1.0 / 64.0;

/// Pixel-to-angle map of an `H x W` equirectangular image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarGrid {
    pub height: usize,
    pub width: usize,
}

impl PolarGrid {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        check_dims(height, width, 2)?;
        Ok(Self { height, width })
    }

    pub fn alpha(&self, w: usize) -> f64 {
        TAU * w as f64 / self.width as f64
    }

    pub fn theta(&self, h: usize) -> f64 {
        PI * h as f64 / self.height as f64
    }
}

/// Positional conditioning with unit scaling along the sphere grid lines:
/// pixel `(h, w)` gets `(alpha sin(theta), theta)`.
pub fn sphere_positional_field(height: usize, width: usize) -> Result<WarpField> {
    let g = PolarGrid::new(height, width)?;
    WarpField::from_fn(height, width, |w, h| {
        let (a, t) = (g.alpha(w), g.theta(h));
        NormalizedPoint::new(a * t.sin(), t)
    })
}

/// Attention density `|sin(theta)|`, floored like every other density.
pub fn sphere_positional_density(height: usize, width: usize) -> Result<DensityMap> {
    let g = PolarGrid::new(height, width)?;
    let values = (0..height)
        .flat_map(|h| {
            let d = clamp_density(g.theta(h).sin().abs());
            std::iter::repeat_n(d, width)
        })
        .collect();
    DensityMap::new(height, width, values)
}

/// Distance on the sphere from `(alpha, theta)` to the image-center origin
/// `(pi, pi/2)`, as `arccos(|cos(alpha - pi) cos(pi/2 - theta)|)`.
///
/// The absolute value folds separations beyond `pi/2` back, so this agrees
/// with the great-circle distance only while `|alpha - pi| <= pi/2`.
pub fn distance_to_origin(alpha: f64, theta: f64) -> f64 {
    ((alpha - PI).cos() * (FRAC_PI_2 - theta).cos()).abs().min(1.0).acos()
}

/// Metric conditioning for the sphere: `g11 = sin^2(theta)` on the
/// horizontal (azimuth) axis, `g22 = 1` on the vertical (polar) axis,
/// `g12 = 0`, the spherical distance channel, and density `|sin(theta)|`.
pub fn sphere_metric_pack(height: usize, width: usize) -> Result<(MetricField, DensityMap)> {
    let g = PolarGrid::new(height, width)?;
    let mut values = Vec::with_capacity(height * width);
    for h in 0..height {
        let t = g.theta(h);
        let s = t.sin();
        for w in 0..width {
            values.push(MetricSample {
                g11: s * s,
                g22: 1.0,
                g12: 0.0,
                dist: distance_to_origin(g.alpha(w), t),
            });
        }
    }
    let metric = MetricField {
        height,
        width,
        values,
    };
    Ok((metric, sphere_positional_density(height, width)?))
}

/// Number of right-border columns replaced for a given width.
pub fn seam_columns(width: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 0.1) {
        return Err(Error::param("seam_fraction", "must lie in (0, 0.1]"));
    }
    Ok(((fraction * width as f64).ceil() as usize).clamp(1, width))
}

/// Overwrites the rightmost `ceil(fraction * W)` columns of every row with
/// the leftmost ones. `data` holds contiguous rows of `width` elements (any
/// number of rows, e.g. a planar `C x H x W` tensor).
pub fn seam_blend<T: Copy>(data: &mut [T], width: usize, fraction: f64) -> Result<()> {
    let k = seam_columns(width, fraction)?;
    if width == 0 || data.len() % width != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} values do not form rows of width {width}",
            data.len()
        )));
    }
    for row in data.chunks_mut(width) {
        row.copy_within(0..k, width - k);
    }
    Ok(())
}

/// Mean absolute difference between the first and last column.
pub fn seam_discrepancy(data: &[f64], width: usize) -> f64 {
    let rows = data.len() / width;
    data.chunks(width)
        .map(|r| (r[0] - r[width - 1]).abs())
        .sum::<f64>()
        / rows as f64
}

/// Point on the unit sphere depicted by equirectangular pixel `(h, w)`.
/// `x` points at `alpha = 0` on the equator, `z` at the north pole.
pub fn equirect_to_xyz(h: usize, w: usize, height: usize, width: usize) -> [f64; 3] {
    let g = PolarGrid { height, width };
    let (a, t) = (g.alpha(w), g.theta(h));
    [t.sin() * a.cos(), t.sin() * a.sin(), t.cos()]
}
