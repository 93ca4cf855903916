//! Procedural patterns with closed-form intensities, and the training-sample
//! pipeline that distorts them together with their coordinate grid.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{ConditioningMode, ConditioningPack};
use crate::error::{Error, Result};
use crate::grid::WarpField;
use crate::lens::{sample_lens_draw, LensParams, WarpSchedule};
use crate::resample::{warp_then_crop, Coverage, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatternFamily {
    /// Horizontal stripes: intensity varies down the image.
    StripesH,
    /// Vertical stripes: intensity varies across the image.
    StripesV,
    Checker,
    Rings,
    Dots,
    Gradient,
}

impl PatternFamily {
    pub const ALL: [PatternFamily; 6] = [
        PatternFamily::StripesH,
        PatternFamily::StripesV,
        PatternFamily::Checker,
        PatternFamily::Rings,
        PatternFamily::Dots,
        PatternFamily::Gradient,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PatternFamily::StripesH => "stripes-h",
            PatternFamily::StripesV => "stripes-v",
            PatternFamily::Checker => "checker",
            PatternFamily::Rings => "rings",
            PatternFamily::Dots => "dots",
            PatternFamily::Gradient => "gradient",
        }
    }

    /// Raw pattern value in `[0, 1]` at normalized position `(u, v)`.
    /// `phase` is in cycles.
    pub fn value(self, freq: f64, phase: f64, u: f64, v: f64) -> f64 {
        let wave = |t: f64| 0.5 + 0.5 * (TAU * (freq * t + phase)).cos();
        match self {
            PatternFamily::StripesH => wave(v),
            PatternFamily::StripesV => wave(u),
            PatternFamily::Checker => {
                let cell = |t: f64| (2.0 * (freq * t + phase)).floor() as i64;
                (cell(u) + cell(v)).rem_euclid(2) as f64
            }
            PatternFamily::Rings => wave((u - 0.5).hypot(v - 0.5)),
            PatternFamily::Dots => wave(u) * wave(v),
            PatternFamily::Gradient => {
                let t = freq * 0.5 * (u + v) + phase;
                1.0 - (2.0 * (t - t.floor()) - 1.0).abs()
            }
        }
    }
}

impl fmt::Display for PatternFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PatternFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::param("family", format!("unknown pattern family {s:?}")))
    }
}

pub const MIN_FREQUENCY: f64 = 2.0;
pub const MAX_FREQUENCY: f64 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatternSpec {
    pub family: PatternFamily,
    /// Cycles per unit of normalized coordinate.
    pub frequency: f64,
    /// Phase offset in cycles.
    pub phase: f64,
    /// 0 keeps the full `[0, 1]` range; other seeds pick a reduced contrast.
    pub palette_seed: u64,
}

impl PatternSpec {
    pub fn new(family: PatternFamily, frequency: f64) -> Result<Self> {
        let spec = Self {
            family,
            frequency,
            phase: 0.0,
            palette_seed: 0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_FREQUENCY..=MAX_FREQUENCY).contains(&self.frequency) {
            return Err(Error::param(
                "frequency",
                format!("{} outside [{MIN_FREQUENCY}, {MAX_FREQUENCY}]", self.frequency),
            ));
        }
        if !self.phase.is_finite() {
            return Err(Error::NonFinite("phase"));
        }
        Ok(())
    }

    /// `(low, high)` intensities.
    pub fn palette(&self) -> (f64, f64) {
        if self.palette_seed == 0 {
            return (0.0, 1.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.palette_seed);
        (rng.random_range(0.0..0.3), rng.random_range(0.7..1.0))
    }

    pub fn intensity(&self, u: f64, v: f64) -> f64 {
        let (lo, hi) = self.palette();
        lo + (hi - lo) * self.family.value(self.frequency, self.phase, u, v)
    }
}

/// Renders a square single-channel image, sampling at pixel centers.
pub fn render_pattern(spec: &PatternSpec, resolution: usize) -> Result<Image> {
    spec.validate()?;
    let n = resolution as f64;
    Image::from_fn(resolution, resolution, |x, y| {
        spec.intensity((x as f64 + 0.5) / n, (y as f64 + 0.5) / n)
    })
}

/// Evaluates the pattern directly at the field's coordinates, giving
/// `background` where the coordinate leaves the unit square. This is what a
/// perfectly conditioned generator would draw for `field`.
pub fn render_through_field(spec: &PatternSpec, field: &WarpField, background: f64) -> Result<(Image, Coverage)> {
    spec.validate()?;
    let (h, w) = (field.height(), field.width());
    let mut mask = vec![false; h * w];
    let mut data = vec![background; h * w];
    for (i, p) in field.coords().iter().enumerate() {
        if field.valid()[i] && (0.0..=1.0).contains(&p.u) && (0.0..=1.0).contains(&p.v) {
            mask[i] = true;
            data[i] = spec.intensity(p.u, p.v);
        }
    }
    Ok((
        Image::from_vec(h, w, 1, data)?,
        Coverage {
            height: h,
            width: w,
            mask,
        },
    ))
}

/// What a training corpus draws from.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    /// Class `i` is `families[i]`.
    pub families: Vec<PatternFamily>,
    /// Inclusive integer frequency range.
    pub frequency_range: (u32, u32),
    pub random_phase: bool,
    pub random_palette: bool,
    pub mode: ConditioningMode,
    /// Average-pool factors of the model's attention resolutions.
    pub pyramid_factors: Vec<usize>,
    pub schedule: WarpSchedule,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            families: vec![PatternFamily::StripesH, PatternFamily::Checker],
            frequency_range: (2, 6),
            random_phase: true,
            random_palette: false,
            mode: ConditioningMode::Positional,
            pyramid_factors: vec![4, 8],
            schedule: WarpSchedule::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::param("families", "at least one family is required"));
        }
        let (lo, hi) = self.frequency_range;
        if lo > hi || (lo as f64) < MIN_FREQUENCY || (hi as f64) > MAX_FREQUENCY {
            return Err(Error::param(
                "frequency_range",
                format!("{lo}..={hi} must lie within [{MIN_FREQUENCY}, {MAX_FREQUENCY}]"),
            ));
        }
        Ok(())
    }

    pub fn class_of(&self, family: PatternFamily) -> Option<usize> {
        self.families.iter().position(|&f| f == family)
    }

    pub fn draw_spec<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, PatternSpec) {
        let class = rng.random_range(0..self.families.len());
        let (lo, hi) = self.frequency_range;
        let spec = PatternSpec {
            family: self.families[class],
            frequency: rng.random_range(lo..=hi) as f64,
            phase: if self.random_phase { rng.random::<f64>() } else { 0.0 },
            palette_seed: if self.random_palette { rng.random_range(1..u64::MAX) } else { 0 },
        };
        (class, spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub image: Image,
    pub class: usize,
    pub pack: ConditioningPack,
    pub spec: PatternSpec,
    pub lens: LensParams,
    pub field: WarpField,
    pub coverage: Coverage,
}

/// Renders a random pattern at twice the model resolution, distorts it with
/// a lens drawn for training `progress`, and crops image and coordinate grid
/// together.
pub fn make_training_sample<R: Rng + ?Sized>(
    rng: &mut R,
    progress: f64,
    model_res: usize,
    config: &CorpusConfig,
) -> Result<TrainingSample> {
    config.validate()?;
    let (class, spec) = config.draw_spec(rng);
    let src = render_pattern(&spec, 2 * model_res)?;
    let lens = sample_lens_draw(&config.schedule, rng, progress).lens;
    let crop = warp_then_crop(&src, &lens, rng, model_res)?;
    let pack = ConditioningPack::from_field(&crop.field, config.mode, &config.pyramid_factors)?;
    Ok(TrainingSample {
        image: crop.image,
        class,
        pack,
        spec,
        lens,
        field: crop.field,
        coverage: crop.coverage,
    })
}
