//! Finite-difference geometry of warp fields.
//!
//! Partial derivatives use central differences `(f[i+1] - f[i-1]) / (2 delta)`
//! in the interior and one-sided differences on the one-pixel border. The
//! step `delta` is one pixel in normalized units, `1 / min(H, W)`, along both
//! axes (the inverse width for square images), so identity fields have unit
//! Jacobians at any aspect ratio.
//!
//! From the Jacobian `J = d(u, v) / d(x, y)` of the backward map we derive
//! the content density `|det J|` and the pullback of the Euclidean metric,
//! `g = J^T J`:
//!
//! ```text
//! g11 = (du/dx)^2 + (dv/dx)^2
//! g22 = (du/dy)^2 + (dv/dy)^2
//! g12 = du/dx du/dy + dv/dx dv/dy
//! ```
//!
//! so that `det g = (det J)^2` holds identically.

use crate::error::{Error, Result};
use crate::grid::{check_dims, WarpField};

/// Lower clamp applied to densities so their logarithm stays finite.
pub const DENSITY_FLOOR: f64 = 1e-6;

/// Per-pixel partial derivatives of the field coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Jacobian {
    pub du_dx: f64,
    pub du_dy: f64,
    pub dv_dx: f64,
    pub dv_dy: f64,
}

impl Jacobian {
    pub fn det(&self) -> f64 {
        self.du_dx * self.dv_dy - self.du_dy * self.dv_dx
    }

    pub fn metric(&self) -> (f64, f64, f64) {
        (
            self.du_dx * self.du_dx + self.dv_dx * self.dv_dx,
            self.du_dy * self.du_dy + self.dv_dy * self.dv_dy,
            self.du_dx * self.du_dy + self.dv_dx * self.dv_dy,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianField {
    pub height: usize,
    pub width: usize,
    pub values: Vec<Jacobian>,
}

/// Per-pixel content density, strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl DensityMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(height, width, 2)?;
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "density {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|d| !d.is_finite() || *d <= 0.0) {
            return Err(Error::param("density", "values must be finite and positive"));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// Constant density map.
    pub fn uniform(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.height, self.width, self.values.iter().map(|d| d * c).collect())
    }
}

/// Pullback metric components with the distance-to-origin channel.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricSample {
    pub g11: f64,
    pub g22: f64,
    pub g12: f64,
    pub dist: f64,
}

impl MetricSample {
    pub fn det(&self) -> f64 {
        self.g11 * self.g22 - self.g12 * self.g12
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricField {
    pub height: usize,
    pub width: usize,
    pub values: Vec<MetricSample>,
}

impl MetricField {
    pub fn at(&self, x: usize, y: usize) -> MetricSample {
        self.values[y * self.width + x]
    }
}

/// Finite-difference Jacobian of the field coordinates.
pub fn jacobian(field: &WarpField) -> Result<JacobianField> {
    let (h, w) = (field.height(), field.width());
    check_dims(h, w, 3)?;
    let delta = 1.0 / h.min(w) as f64;
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (xa, xb, nx) = stencil(x, w);
            let (ya, yb, ny) = stencil(y, h);
            let (pa, pb) = (field.at(xa, y), field.at(xb, y));
            let (qa, qb) = (field.at(x, ya), field.at(x, yb));
            let sx = nx * delta;
            let sy = ny * delta;
            values.push(Jacobian {
                du_dx: (pb.u - pa.u) / sx,
                du_dy: (qb.u - qa.u) / sy,
                dv_dx: (pb.v - pa.v) / sx,
                dv_dy: (qb.v - qa.v) / sy,
            });
        }
    }
    Ok(JacobianField {
        height: h,
        width: w,
        values,
    })
}

/// Neighbor indices and their separation in grid steps.
fn stencil(i: usize, n: usize) -> (usize, usize, f64) {
    if i == 0 {
        (0, 1, 1.0)
    } else if i == n - 1 {
        (n - 2, n - 1, 1.0)
    } else {
        (i - 1, i + 1, 2.0)
    }
}

/// `max(|det J|, DENSITY_FLOOR)` per pixel.
pub fn density(field: &WarpField) -> Result<DensityMap> {
    let jac = jacobian(field)?;
    let values = jac
        .values
        .iter()
        .map(|j| clamp_density(j.det().abs()))
        .collect();
    DensityMap::new(jac.height, jac.width, values)
}

pub(crate) fn clamp_density(d: f64) -> f64 {
    if d.is_finite() {
        d.max(DENSITY_FLOOR)
    } else {
        DENSITY_FLOOR
    }
}

/// Pullback metric `J^T J` plus the Euclidean distance of each pixel's
/// coordinates to `(0.5, 0.5)`.
pub fn pullback_metric(field: &WarpField) -> Result<MetricField> {
    let jac = jacobian(field)?;
    let values = jac
        .values
        .iter()
        .zip(field.coords())
        .map(|(j, p)| {
            let (g11, g22, g12) = j.metric();
            MetricSample {
                g11,
                g22,
                g12,
                dist: (p.u - 0.5).hypot(p.v - 0.5),
            }
        })
        .collect();
    Ok(MetricField {
        height: jac.height,
        width: jac.width,
        values,
    })
}
