//! Geometric fidelity measures: displacement fields, stripe straightness,
//! and an analytic oracle that recovers the radial lens of a distorted
//! procedural pattern.

use std::fmt;

use rayon::prelude::*;

use crate::datagen::PatternFamily;
use crate::error::{Error, Result};
use crate::grid::WarpField;
use crate::lens::{warp_field_from_lens, LensParams};
use crate::resample::{unwarp, Coverage, Image};

/// Per-pixel displacement `(dx, dy)` in pixels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub height: usize,
    pub width: usize,
    pub values: Vec<[f64; 2]>,
}

impl DisplacementField {
    pub fn new(height: usize, width: usize, values: Vec<[f64; 2]>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "displacement {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("displacement"));
        }
        Ok(Self { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![[0.0; 2]; height * width],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> [f64; 2] {
        self.values[y * self.width + x]
    }

    pub fn mean_norm(&self) -> f64 {
        self.values.iter().map(|d| d[0].hypot(d[1])).sum::<f64>() / self.values.len() as f64
    }
}

/// Pixel displacement implied by a field at resolution `res`:
/// `(res * u - x, res * v - y)`.
pub fn conditioning_displacement(field: &WarpField, res: usize) -> DisplacementField {
    let r = res as f64;
    let w = field.width();
    let values = field
        .coords()
        .iter()
        .enumerate()
        .map(|(i, p)| [r * p.u - (i % w) as f64, r * p.v - (i / w) as f64])
        .collect();
    DisplacementField {
        height: field.height(),
        width: w,
        values,
    }
}

/// Mean l2 norm of `a - b` over all pixels.
pub fn displacement_error(a: &DisplacementField, b: &DisplacementField) -> Result<f64> {
    displacement_error_masked(a, b, &Coverage::full(a.height, a.width))
}

pub fn displacement_error_masked(a: &DisplacementField, b: &DisplacementField, mask: &Coverage) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) || (a.height, a.width) != (mask.height, mask.width) {
        return Err(Error::ShapeMismatch(format!(
            "displacements {}x{} and {}x{}, mask {}x{}",
            a.height, a.width, b.height, b.width, mask.height, mask.width
        )));
    }
    let (sum, n) = a
        .values
        .iter()
        .zip(&b.values)
        .zip(&mask.mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), ((p, q), _)| (s + (p[0] - q[0]).hypot(p[1] - q[1]), n + 1));
    if n == 0 {
        return Err(Error::ShapeMismatch("displacement error over an empty mask".into()));
    }
    Ok(sum / n as f64)
}

/// Direction along which a straight pattern is constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    Rows,
    Columns,
}

impl Orientation {
    /// Orientation in which `family` is constant, if any.
    pub fn of(family: PatternFamily) -> Option<Self> {
        match family {
            PatternFamily::StripesH => Some(Orientation::Rows),
            PatternFamily::StripesV => Some(Orientation::Columns),
            _ => None,
        }
    }
}

/// Mean per-row (or per-column) intensity variance after removing each
/// line's mean; 0 for perfect stripes along that orientation.
pub fn straightness(img: &Image, orientation: Orientation) -> f64 {
    straightness_masked(img, orientation, &Coverage::full(img.height(), img.width()))
}

/// [`straightness`] restricted to covered pixels. Lines with fewer than two
/// covered pixels are skipped; the rest are weighted by their pixel count.
pub fn straightness_masked(img: &Image, orientation: Orientation, mask: &Coverage) -> f64 {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let (lines, len) = match orientation {
        Orientation::Rows => (h, w),
        Orientation::Columns => (w, h),
    };
    let index = |line: usize, k: usize| match orientation {
        Orientation::Rows => (k, line),
        Orientation::Columns => (line, k),
    };
    let (mut total, mut count) = (0.0, 0usize);
    for ch in 0..c {
        for line in 0..lines {
            let vals: Vec<f64> = (0..len)
                .map(|k| index(line, k))
                .filter(|&(x, y)| mask.is_covered(x, y))
                .map(|(x, y)| img.get(x, y, ch))
                .collect();
            if vals.len() < 2 {
                continue;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            total += vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
            count += vals.len();
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Fraction of the (masked, centered) image energy left unexplained by the
/// best fit `c + a(y) b(x)`. Stripes, checkers and dot grids are exactly
/// separable; bending their lines is not. `None` when fewer than 16 pixels
/// are covered or the image is flat.
pub fn separability_residual(img: &Image, mask: &Coverage) -> Option<f64> {
    let (h, w) = (img.height(), img.width());
    let m: Vec<f64> = (0..h * w).map(|i| img.data()[i * img.channels()]).collect();
    let wt: Vec<f64> = mask.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let n: f64 = wt.iter().sum();
    if n < 16.0 {
        return None;
    }
    let mean = m.iter().zip(&wt).map(|(v, w)| v * w).sum::<f64>() / n;
    let energy: f64 = m.iter().zip(&wt).map(|(v, w)| w * (v - mean).powi(2)).sum();
    if energy <= 1e-12 * n {
        return None;
    }
    // Starting points: constant rows, constant columns, and the column with
    // the most energy, so no separable pattern starts orthogonal to its fit.
    let best_col = (0..w)
        .max_by(|&a, &b| {
            let e = |x: usize| (0..h).map(|y| wt[y * w + x] * (m[y * w + x] - mean).powi(2)).sum::<f64>();
            e(a).total_cmp(&e(b))
        })
        .unwrap_or(0);
    let starts: [Vec<f64>; 3] = [
        vec![1.0; h],
        (0..h)
            .map(|y| {
                let (s, k) = (0..w).fold((0.0, 0.0), |(s, k), x| {
                    (s + wt[y * w + x] * (m[y * w + x] - mean), k + wt[y * w + x])
                });
                if k > 0.0 {
                    s / k
                } else {
                    0.0
                }
            })
            .collect(),
        (0..h).map(|y| m[y * w + best_col] - mean).collect(),
    ];
    let fit = |mut a: Vec<f64>| {
        let mut b = vec![0.0; w];
        let mut c = mean;
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            for (x, bx) in b.iter_mut().enumerate() {
                let (num, den) = (0..h).fold((0.0, 0.0), |(num, den), y| {
                    let k = wt[y * w + x];
                    (num + k * (m[y * w + x] - c) * a[y], den + k * a[y] * a[y])
                });
                *bx = if den > 0.0 { num / den } else { 0.0 };
            }
            for (y, ay) in a.iter_mut().enumerate() {
                let (num, den) = (0..w).fold((0.0, 0.0), |(num, den), x| {
                    let k = wt[y * w + x];
                    (num + k * (m[y * w + x] - c) * b[x], den + k * b[x] * b[x])
                });
                *ay = if den > 0.0 { num / den } else { 0.0 };
            }
            c = (0..h * w).map(|i| wt[i] * (m[i] - a[i / w] * b[i % w])).sum::<f64>() / n;
            let r = (0..h * w)
                .map(|i| wt[i] * (m[i] - c - a[i / w] * b[i % w]).powi(2))
                .sum::<f64>();
            if last - r <= 1e-10 * energy {
                return r;
            }
            last = r;
        }
        last
    };
    let best = starts.into_iter().map(fit).fold(f64::INFINITY, f64::min);
    Some(best / energy)
}

/// Search ranges of the lens oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOptions {
    pub k1_min: f64,
    pub k1_max: f64,
    /// Grid spacing per level, coarse to fine. Each finer level searches
    /// two steps of the previous level around its best value.
    pub steps: [f64; 3],
    /// Smallest covered fraction of the rectified image a candidate needs.
    pub min_coverage: f64,
    /// Residual above which the result is flagged unreliable.
    pub max_residual: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            k1_min: -0.5,
            k1_max: 26.0,
            steps: [0.5, 0.05, 0.005],
            min_coverage: 0.2,
            max_residual: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LensEstimate {
    pub k1: f64,
    pub residual: f64,
    pub displacement: DisplacementField,
    pub reliable: bool,
}

/// Recovers the centered radial lens `k1` that best straightens `img`,
/// assuming the undistorted content is a separable pattern of `family`.
pub fn estimate_displacement(img: &Image, family: PatternFamily) -> Result<LensEstimate> {
    estimate_displacement_with(img, family, OracleOptions::default())
}

pub fn estimate_displacement_with(img: &Image, family: PatternFamily, opts: OracleOptions) -> Result<LensEstimate> {
    let (h, w) = (img.height(), img.width());
    let supported = matches!(
        family,
        PatternFamily::StripesH | PatternFamily::StripesV | PatternFamily::Checker | PatternFamily::Dots
    );
    let flagged = |k1: f64| -> Result<LensEstimate> {
        let field = warp_field_from_lens(&LensParams::radial(k1), h, w)?;
        Ok(LensEstimate {
            k1,
            residual: f64::INFINITY,
            displacement: conditioning_displacement(&field, h.min(w)),
            reliable: false,
        })
    };
    if !supported {
        return flagged(0.0);
    }
    let score = |k1: f64| -> f64 {
        let Ok(field) = warp_field_from_lens(&LensParams::radial(k1), h, w) else {
            return f64::INFINITY;
        };
        let Ok((rect, cov)) = unwarp(img, &field, h, w) else {
            return f64::INFINITY;
        };
        if cov.fraction() < opts.min_coverage {
            return f64::INFINITY;
        }
        separability_residual(&rect, &cov).unwrap_or(f64::INFINITY)
    };
    let search = |lo: f64, hi: f64, step: f64| -> (f64, f64) {
        let n = ((hi - lo) / step).round() as usize;
        (0..=n)
            .into_par_iter()
            .map(|i| {
                let k = lo + i as f64 * step;
                (k, score(k))
            })
            .reduce(|| (0.0, f64::INFINITY), |a, b| if b.1 < a.1 || (b.1 == a.1 && b.0 < a.0) { b } else { a })
    };
    let (mut k1, mut best) = search(opts.k1_min, opts.k1_max, opts.steps[0]);
    for pair in opts.steps.windows(2) {
        let (prev, step) = (pair[0], pair[1]);
        let lo = (k1 - 2.0 * prev).max(opts.k1_min);
        let hi = (k1 + 2.0 * prev).min(opts.k1_max);
        (k1, best) = search(lo, hi, step);
    }
    if !best.is_finite() {
        return flagged(0.0);
    }
    let field = warp_field_from_lens(&LensParams::radial(k1), h, w)?;
    Ok(LensEstimate {
        k1,
        residual: best,
        displacement: conditioning_displacement(&field, h.min(w)),
        reliable: best <= opts.max_residual,
    })
}

/// One line of an evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportLine {
    pub metric: String,
    pub value: f64,
    pub tolerance: String,
    pub pass: bool,
}

impl fmt::Display for ReportLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:.6} {} {}",
            self.metric,
            self.value,
            self.tolerance,
            if self.pass { "pass" } else { "fail" }
        )
    }
}
