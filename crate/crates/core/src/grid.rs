//! Normalized coordinate grids.
//!
//! Every image of size `H x W` carries a coordinate system in which the
//! centered maximum square crop is the unit square `[0, 1]^2`. A pixel at
//! column `i_x`, row `i_y` (corner convention, no half-pixel offset) sits at
//!
//! ```text
//! (x, y) = (i_x / min(H, W) + s_x, i_y / min(H, W) + s_y)
//! ```
//!
//! with `s = -(longer - shorter) / (2 min(H, W))` along the longer axis and
//! zero along the shorter one.
//!
//! A [`WarpField`] stores one such normalized point per output pixel: the
//! location, in an undistorted reference frame, that the pixel depicts.

use crate::error::{Error, Result};

/// A point in normalized (dimensionless) image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NormalizedPoint {
    pub u: f64,
    pub v: f64,
}

impl NormalizedPoint {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

/// Affine map between pixel indices of an `H x W` image and its normalized
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    scale: f64,
    shift_u: f64,
    shift_v: f64,
}

impl Frame {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        check_dims(height, width, 2)?;
        let short = height.min(width) as f64;
        let shift_u = -((width - height.min(width)) as f64) / (2.0 * short);
        let shift_v = -((height - height.min(width)) as f64) / (2.0 * short);
        Ok(Self {
            height,
            width,
            scale: short,
            shift_u,
            shift_v,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Pixels per normalized unit (the short side).
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn shift(&self) -> (f64, f64) {
        (self.shift_u, self.shift_v)
    }

    pub fn to_normalized(&self, x: f64, y: f64) -> NormalizedPoint {
        NormalizedPoint {
            u: x / self.scale + self.shift_u,
            v: y / self.scale + self.shift_v,
        }
    }

    /// Inverse of [`Frame::to_normalized`]: continuous pixel position `(x, y)`.
    pub fn to_pixel(&self, p: NormalizedPoint) -> (f64, f64) {
        (
            (p.u - self.shift_u) * self.scale,
            (p.v - self.shift_v) * self.scale,
        )
    }
}

pub(crate) fn check_dims(height: usize, width: usize, min: usize) -> Result<()> {
    if height < min || width < min {
        return Err(Error::InvalidDimensions {
            height,
            width,
            reason: if min == 2 {
                "both sides must be at least 2"
            } else {
                "both sides must be at least 3"
            },
        });
    }
    Ok(())
}

/// Per-pixel backward map: for each output pixel, its normalized coordinate
/// in the undistorted frame, plus a coverage flag.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpField {
    height: usize,
    width: usize,
    coords: Vec<NormalizedPoint>,
    valid: Vec<bool>,
}

impl WarpField {
    /// Builds a field from a closure over `(x, y)` = (column, row).
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> NormalizedPoint,
    ) -> Result<Self> {
        check_dims(height, width, 2)?;
        let mut coords = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                coords.push(f(x, y));
            }
        }
        Self::from_parts(height, width, coords, vec![true; height * width])
    }

    pub fn from_parts(
        height: usize,
        width: usize,
        coords: Vec<NormalizedPoint>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        check_dims(height, width, 2)?;
        if coords.len() != height * width || valid.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "warp field {height}x{width} needs {} samples, got {} coords and {} flags",
                height * width,
                coords.len(),
                valid.len()
            )));
        }
        if coords.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("warp field coordinates"));
        }
        Ok(Self {
            height,
            width,
            coords,
            valid,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[NormalizedPoint] {
        &self.coords
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn at(&self, x: usize, y: usize) -> NormalizedPoint {
        self.coords[y * self.width + x]
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn map_coords(&self, mut f: impl FnMut(NormalizedPoint) -> NormalizedPoint) -> Result<Self> {
        let coords = self.coords.iter().map(|&p| f(p)).collect();
        Self::from_parts(self.height, self.width, coords, self.valid.clone())
    }

    /// Bilinear interpolation of the coordinates at continuous pixel position
    /// `(x, y)`, together with the partial derivatives of `(u, v)` with
    /// respect to `x` and `y` inside the enclosing cell.
    ///
    /// Returns `None` outside `[0, W-1] x [0, H-1]` or when any corner of the
    /// cell is invalid.
    pub fn sample(&self, x: f64, y: f64) -> Option<FieldSample> {
        let (w, h) = (self.width, self.height);
        if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
            return None;
        }
        let x0 = (x.floor() as usize).min(w - 2);
        let y0 = (y.floor() as usize).min(h - 2);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let i00 = y0 * w + x0;
        let idx = [i00, i00 + 1, i00 + w, i00 + w + 1];
        if idx.iter().any(|&i| !self.valid[i]) {
            return None;
        }
        let [p00, p10, p01, p11] = idx.map(|i| self.coords[i]);
        let lerp = |a: f64, b: f64, c: f64, d: f64| {
            (1.0 - fx) * (1.0 - fy) * a + fx * (1.0 - fy) * b + (1.0 - fx) * fy * c + fx * fy * d
        };
        Some(FieldSample {
            point: NormalizedPoint {
                u: lerp(p00.u, p10.u, p01.u, p11.u),
                v: lerp(p00.v, p10.v, p01.v, p11.v),
            },
            du_dx: (1.0 - fy) * (p10.u - p00.u) + fy * (p11.u - p01.u),
            du_dy: (1.0 - fx) * (p01.u - p00.u) + fx * (p11.u - p10.u),
            dv_dx: (1.0 - fy) * (p10.v - p00.v) + fy * (p11.v - p01.v),
            dv_dy: (1.0 - fx) * (p01.v - p00.v) + fx * (p11.v - p10.v),
        })
    }
}

/// Interpolated field value with its local (per-pixel) derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub point: NormalizedPoint,
    pub du_dx: f64,
    pub du_dy: f64,
    pub dv_dx: f64,
    pub dv_dy: f64,
}

/// The identity warp field of an `H x W` image.
pub fn normalized_grid(height: usize, width: usize) -> Result<WarpField> {
    let frame = Frame::new(height, width)?;
    WarpField::from_fn(height, width, |x, y| frame.to_normalized(x as f64, y as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_grid_has_no_shift() {
        let g = normalized_grid(512, 512).unwrap();
        assert_eq!(g.at(0, 0), NormalizedPoint::new(0.0, 0.0));
        assert_eq!(g.at(256, 256), NormalizedPoint::new(0.5, 0.5));
        assert_eq!(g.at(3, 7), NormalizedPoint::new(3.0 / 512.0, 7.0 / 512.0));
    }

    #[test]
    fn wide_grid_centers_the_square_crop() {
        let g = normalized_grid(256, 512).unwrap();
        assert_eq!(g.at(256, 128), NormalizedPoint::new(0.5, 0.5));
        assert_eq!(g.at(0, 0), NormalizedPoint::new(-0.5, 0.0));
        // The crop [128, 384) x [0, 256) spans the unit square.
        assert_eq!(g.at(128, 0), NormalizedPoint::new(0.0, 0.0));
    }

    #[test]
    fn tall_grid_shifts_vertically() {
        let g = normalized_grid(300, 100).unwrap();
        assert_eq!(g.at(0, 100), NormalizedPoint::new(0.0, 0.0));
        assert_eq!(g.at(50, 150), NormalizedPoint::new(0.5, 0.5));
    }

    #[test]
    fn degenerate_dimensions_are_rejected() {
        assert!(matches!(
            normalized_grid(1, 10),
            Err(Error::InvalidDimensions { .. })
        ));
        assert!(normalized_grid(10, 0).is_err());
        assert!(normalized_grid(2, 2).is_ok());
    }

    #[test]
    fn translation_shifts_coordinates_by_scaled_offset() {
        let (h, w) = (40, 70);
        let g = normalized_grid(h, w).unwrap();
        let m = 40.0;
        for (dx, dy) in [(1usize, 0usize), (5, 3), (13, 11)] {
            for (x, y) in [(0, 0), (10, 20), (50, 25)] {
                let a = g.at(x, y);
                let b = g.at(x + dx, y + dy);
                assert!((b.u - a.u - dx as f64 / m).abs() < 1e-12);
                assert!((b.v - a.v - dy as f64 / m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frame_round_trips_pixels() {
        let f = Frame::new(48, 80).unwrap();
        for (x, y) in [(0.0, 0.0), (79.0, 47.0), (12.25, 30.5)] {
            let (bx, by) = f.to_pixel(f.to_normalized(x, y));
            assert!((bx - x).abs() < 1e-12 && (by - y).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_sample_reproduces_affine_fields() {
        let g = normalized_grid(16, 16).unwrap();
        let s = g.sample(3.25, 7.5).unwrap();
        assert!((s.point.u - 3.25 / 16.0).abs() < 1e-15);
        assert!((s.point.v - 7.5 / 16.0).abs() < 1e-15);
        assert!((s.du_dx - 1.0 / 16.0).abs() < 1e-15);
        assert!(s.du_dy.abs() < 1e-15 && s.dv_dx.abs() < 1e-15);
        assert!(g.sample(15.0, 15.0).is_some());
        assert!(g.sample(15.01, 0.0).is_none());
        assert!(g.sample(-0.01, 0.0).is_none());
    }

    #[test]
    fn non_finite_coordinates_are_rejected() {
        let r = WarpField::from_fn(4, 4, |x, _| NormalizedPoint::new(if x == 2 { f64::NAN } else { 0.0 }, 0.0));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
