//! Conditioning channels and attention log-density pyramids fed to a model.

use std::fmt;
use std::str::FromStr;

use crate::differential::{density, pullback_metric, DensityMap, MetricField};
use crate::error::{Error, Result};
use crate::grid::WarpField;

/// Which per-pixel geometry the model sees at its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ConditioningMode {
    /// Two channels: normalized coordinates `(u, v)`.
    #[default]
    Positional,
    /// Four channels: `(g11, g22, g12, dist)`.
    Metric,
}

impl ConditioningMode {
    pub fn channels(self) -> usize {
        match self {
            ConditioningMode::Positional => 2,
            ConditioningMode::Metric => 4,
        }
    }
}

impl fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConditioningMode::Positional => "positional",
            ConditioningMode::Metric => "metric",
        })
    }
}

impl FromStr for ConditioningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positional" => Ok(ConditioningMode::Positional),
            "metric" => Ok(ConditioningMode::Metric),
            other => Err(Error::param("mode", format!("unknown mode {other:?}"))),
        }
    }
}

/// `ln d` at one attention resolution, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogDensityLevel {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Average-pools `density` by each factor and takes the logarithm.
///
/// Pooling happens before the logarithm so a pooled cell carries the mean
/// content density of the pixels it covers.
pub fn downsample_log_density(density: &DensityMap, factors: &[usize]) -> Result<Vec<LogDensityLevel>> {
    let (h, w) = (density.height(), density.width());
    factors
        .iter()
        .map(|&f| {
            if f == 0 || h % f != 0 || w % f != 0 {
                return Err(Error::param(
                    "pyramid factor",
                    format!("{f} does not divide {h}x{w}"),
                ));
            }
            let (ph, pw) = (h / f, w / f);
            let norm = (f * f) as f64;
            let mut values = vec![0.0; ph * pw];
            for y in 0..h {
                for x in 0..w {
                    values[(y / f) * pw + x / f] += density.at(x, y);
                }
            }
            values.iter_mut().for_each(|v| *v = (*v / norm).ln());
            Ok(LogDensityLevel {
                height: ph,
                width: pw,
                values,
            })
        })
        .collect()
}

/// Input-side conditioning for one image: planar channels at model
/// resolution plus one log-density level per attention resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningPack {
    pub mode: ConditioningMode,
    pub height: usize,
    pub width: usize,
    /// `C x H x W`, planar.
    pub channels: Vec<f64>,
    pub log_density: Vec<LogDensityLevel>,
}

impl ConditioningPack {
    /// Builds channels from a warp field; density and metric are derived
    /// from the field itself.
    pub fn from_field(field: &WarpField, mode: ConditioningMode, factors: &[usize]) -> Result<Self> {
        let d = density(field)?;
        match mode {
            ConditioningMode::Positional => Self::positional(field, &d, factors),
            ConditioningMode::Metric => Self::metric(&pullback_metric(field)?, &d, factors),
        }
    }

    /// Positional channels from `field` with an externally supplied density
    /// (e.g. the closed-form sphere density).
    pub fn positional(field: &WarpField, density: &DensityMap, factors: &[usize]) -> Result<Self> {
        let (h, w) = (field.height(), field.width());
        check_same(h, w, density.height(), density.width())?;
        let n = h * w;
        let mut channels = vec![0.0; 2 * n];
        for (i, p) in field.coords().iter().enumerate() {
            channels[i] = p.u;
            channels[n + i] = p.v;
        }
        Ok(Self {
            mode: ConditioningMode::Positional,
            height: h,
            width: w,
            channels,
            log_density: downsample_log_density(density, factors)?,
        })
    }

    pub fn metric(metric: &MetricField, density: &DensityMap, factors: &[usize]) -> Result<Self> {
        let (h, w) = (metric.height, metric.width);
        check_same(h, w, density.height(), density.width())?;
        let n = h * w;
        let mut channels = vec![0.0; 4 * n];
        for (i, s) in metric.values.iter().enumerate() {
            channels[i] = s.g11;
            channels[n + i] = s.g22;
            channels[2 * n + i] = s.g12;
            channels[3 * n + i] = s.dist;
        }
        Ok(Self {
            mode: ConditioningMode::Metric,
            height: h,
            width: w,
            channels,
            log_density: downsample_log_density(density, factors)?,
        })
    }

    pub fn channel_count(&self) -> usize {
        self.mode.channels()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.channels[c * n..(c + 1) * n]
    }

    /// Same pack with every conditioning channel set to zero.
    pub fn zeroed_channels(&self) -> Self {
        Self {
            channels: vec![0.0; self.channels.len()],
            ..self.clone()
        }
    }

    /// Same pack with all log densities set to zero (plain attention).
    pub fn without_reweighting(&self) -> Self {
        let mut out = self.clone();
        for level in &mut out.log_density {
            level.values.iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }

    /// Checks shape agreement with a model's expectations.
    pub fn check(&self, mode: ConditioningMode, res: (usize, usize), levels: &[(usize, usize)]) -> Result<()> {
        if self.mode != mode {
            return Err(Error::ShapeMismatch(format!(
                "pack mode {} but model expects {}",
                self.mode, mode
            )));
        }
        if (self.height, self.width) != res || self.channels.len() != mode.channels() * res.0 * res.1 {
            return Err(Error::ShapeMismatch(format!(
                "pack is {}x{} with {} values, model expects {}x{}x{}",
                self.height,
                self.width,
                self.channels.len(),
                mode.channels(),
                res.0,
                res.1
            )));
        }
        let have: Vec<_> = self.log_density.iter().map(|l| (l.height, l.width)).collect();
        if have != levels {
            return Err(Error::ShapeMismatch(format!(
                "log-density levels {have:?}, model expects {levels:?}"
            )));
        }
        if self.channels.iter().any(|v| !v.is_finite())
            || self.log_density.iter().any(|l| l.values.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite("conditioning pack"));
        }
        Ok(())
    }
}

fn check_same(h: usize, w: usize, dh: usize, dw: usize) -> Result<()> {
    if (h, w) != (dh, dw) {
        return Err(Error::ShapeMismatch(format!(
            "conditioning {h}x{w} vs density {dh}x{dw}"
        )));
    }
    Ok(())
}
