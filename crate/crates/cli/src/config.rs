//! Option groups shared by flags and the TOML config file.
//!
//! Every group is both a clap argument group and a config-file section.
//! Resolution takes the flag, then the file, then the default.

use std::path::Path;

use clap::Args;
use serde::{Deserialize, Serialize};

use geocond::datagen::{CorpusConfig, PatternFamily};
use geocond::{ConditioningMode, LensParams};
use geocond_diffusion::{DenoiserConfig, SampleOptions, TrainConfig, TrainRun};

use crate::error::{CliError, Result};

/// Top level of a config file. Unknown keys are rejected by name.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    #[serde(default)]
    pub lens: LensArgs,
    #[serde(default)]
    pub size: SizeArgs,
    #[serde(default)]
    pub corpus: CorpusArgs,
    #[serde(default)]
    pub model: ModelArgs,
    #[serde(default)]
    pub train: TrainArgs,
    #[serde(default)]
    pub sample: SampleArgs,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

macro_rules! overlay {
    ($flags:expr, $file:expr, $($f:ident),+) => {
        Self { $($f: $flags.$f.clone().or_else(|| $file.$f.clone())),+ }
    };
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LensArgs {
    /// Radial coefficient k1.
    #[arg(long, allow_negative_numbers = true)]
    pub k1: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub k2: Option<f64>,
    /// Tangential coefficient p1.
    #[arg(long, allow_negative_numbers = true)]
    pub p1: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub p2: Option<f64>,
    /// Focal center, normalized.
    #[arg(long, allow_negative_numbers = true)]
    pub cx: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub cy: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub focal: Option<f64>,
}

impl LensArgs {
    pub fn overlay(&self, file: &Self) -> Self {
        overlay!(self, file, k1, k2, p1, p2, cx, cy, focal)
    }

    pub fn is_empty(&self) -> bool {
        [self.k1, self.k2, self.p1, self.p2, self.cx, self.cy, self.focal]
            .iter()
            .all(Option::is_none)
    }

    pub fn resolve(&self) -> Result<LensParams> {
        let d = LensParams::identity();
        let lens = LensParams {
            k1: self.k1.unwrap_or(d.k1),
            k2: self.k2.unwrap_or(d.k2),
            p1: self.p1.unwrap_or(d.p1),
            p2: self.p2.unwrap_or(d.p2),
            cx: self.cx.unwrap_or(d.cx),
            cy: self.cy.unwrap_or(d.cy),
            focal: self.focal.unwrap_or(d.focal),
        };
        lens.validate()?;
        Ok(lens)
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeArgs {
    #[arg(long, visible_alias = "h")]
    pub height: Option<usize>,
    #[arg(long, visible_alias = "w")]
    pub width: Option<usize>,
}

impl SizeArgs {
    pub fn overlay(&self, file: &Self) -> Self {
        overlay!(self, file, height, width)
    }

    pub fn resolve(&self, default: (usize, usize)) -> (usize, usize) {
        (self.height.unwrap_or(default.0), self.width.unwrap_or(default.1))
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusArgs {
    /// Pattern families, one class each, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub families: Option<Vec<String>>,
    #[arg(long)]
    pub freq_min: Option<u32>,
    #[arg(long)]
    pub freq_max: Option<u32>,
    /// Random two-tone palettes instead of black and white.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub random_palette: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub random_phase: Option<bool>,
}

impl CorpusArgs {
    pub fn overlay(&self, file: &Self) -> Self {
        overlay!(self, file, families, freq_min, freq_max, random_palette, random_phase)
    }

    pub fn resolve(&self, mode: ConditioningMode) -> Result<CorpusConfig> {
        let d = CorpusConfig::default();
        let families = match &self.families {
            Some(names) => names
                .iter()
                .map(|n| n.parse::<PatternFamily>())
                .collect::<geocond::Result<Vec<_>>>()?,
            None => d.families.clone(),
        };
        let c = CorpusConfig {
            families,
            frequency_range: (
                self.freq_min.unwrap_or(d.frequency_range.0),
                self.freq_max.unwrap_or(d.frequency_range.1),
            ),
            random_phase: self.random_phase.unwrap_or(d.random_phase),
            random_palette: self.random_palette.unwrap_or(d.random_palette),
            mode,
            ..d
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArgs {
    /// Training resolution (multiple of 8).
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Channel widths of the three levels, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    /// positional or metric.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub emb_dim: Option<usize>,
    /// Sinusoidal bands lifting the conditioning channels (0 = raw).
    #[arg(long)]
    pub cond_bands: Option<usize>,
}

impl ModelArgs {
    pub fn overlay(&self, file: &Self) -> Self {
        overlay!(self, file, resolution, widths, mode, emb_dim, cond_bands)
    }

    pub fn resolve(&self, num_classes: usize, init_seed: u64) -> Result<DenoiserConfig> {
        let d = DenoiserConfig::default();
        let widths = match &self.widths {
            Some(w) => <[usize; 3]>::try_from(w.as_slice())
                .map_err(|_| CliError::validation(format!("widths: expected 3 values, got {}", w.len())))?,
            None => d.widths,
        };
        let mode = match &self.mode {
            Some(m) => m.parse::<ConditioningMode>()?,
            None => d.mode,
        };
        let c = DenoiserConfig {
            resolution: self.resolution.unwrap_or(d.resolution),
            widths,
            mode,
            emb_dim: self.emb_dim.unwrap_or(d.emb_dim),
            cond_bands: self.cond_bands.unwrap_or(d.cond_bands),
            num_classes,
            init_seed,
            ..d
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    /// Total optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub ema_decay: Option<f64>,
}

pub const DEFAULT_TRAIN_STEPS: usize = 4000;
pub const DEFAULT_BATCH_SIZE: usize = 8;

impl TrainArgs {
    pub fn overlay(&self, file: &Self) -> Self {
        overlay!(self, file, steps, batch_size, learning_rate, warmup_steps, ema_decay)
    }

    pub fn resolve(&self, seed: u64) -> Result<(TrainConfig, TrainRun)> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            warmup_steps: self.warmup_steps.unwrap_or(d.warmup_steps),
            ema_decay: self.ema_decay.unwrap_or(d.ema_decay),
            ..d
        };
        if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
            return Err(CliError::validation("learning_rate: must be positive"));
        }
        if !(0.0..1.0).contains(&cfg.ema_decay) {
            return Err(CliError::validation("ema_decay: must lie in [0, 1)"));
        }
        let run = TrainRun {
            steps: self.steps.unwrap_or(DEFAULT_TRAIN_STEPS),
            batch_size: self.batch_size.unwrap_or(DEFAULT_BATCH_SIZE),
            seed,
        };
        if run.batch_size == 0 {
            return Err(CliError::validation("batch_size: must be positive"));
        }
        Ok((cfg, run))
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleArgs {
    /// Denoising steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Images to generate.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub class: Option<usize>,
    /// Right-border fraction overwritten by the left border every step.
    #[arg(long)]
    pub seam_fraction: Option<f64>,
}

impl SampleArgs {
    pub fn overlay(&self, file: &Self) -> Self {
        overlay!(self, file, steps, count, class, seam_fraction)
    }

    pub fn resolve(&self, seed: u64) -> Result<(SampleOptions, usize, usize)> {
        let d = SampleOptions::default();
        let opts = SampleOptions {
            steps: self.steps.unwrap_or(d.steps),
            seed,
            seam_fraction: self.seam_fraction,
        };
        if opts.steps == 0 {
            return Err(CliError::validation("steps: must be positive"));
        }
        if let Some(f) = opts.seam_fraction {
            geocond::sphere::seam_columns(64, f)?;
        }
        Ok((opts, self.count.unwrap_or(1), self.class.unwrap_or(0)))
    }
}

/// Flattened record of what a command ran with, echoed as TOML.
#[derive(Debug, Default, Serialize)]
pub struct Echo {
    pub command: String,
    pub seed: u64,
    pub threads: usize,
    #[serde(flatten)]
    pub values: toml::Table,
}

impl Echo {
    pub fn new(command: &str, seed: u64, threads: usize) -> Self {
        Self {
            command: command.into(),
            seed,
            threads,
            values: toml::Table::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Into<toml::Value>) -> &mut Self {
        self.values.insert(key.into(), value.into());
        self
    }

    pub fn path(&mut self, key: &str, p: &Path) -> &mut Self {
        self.set(key, p.display().to_string())
    }

    pub fn lens(&mut self, l: &LensParams) -> &mut Self {
        let mut t = toml::Table::new();
        for (k, v) in [
            ("k1", l.k1),
            ("k2", l.k2),
            ("p1", l.p1),
            ("p2", l.p2),
            ("cx", l.cx),
            ("cy", l.cy),
            ("focal", l.focal),
        ] {
            t.insert(k.into(), v.into());
        }
        self.set("lens", t)
    }

    pub fn corpus(&mut self, c: &CorpusConfig) -> &mut Self {
        let mut t = toml::Table::new();
        t.insert(
            "families".into(),
            c.families.iter().map(|f| f.name().to_string()).collect::<Vec<_>>().into(),
        );
        t.insert("freq_min".into(), (c.frequency_range.0 as i64).into());
        t.insert("freq_max".into(), (c.frequency_range.1 as i64).into());
        t.insert("random_phase".into(), c.random_phase.into());
        t.insert("random_palette".into(), c.random_palette.into());
        t.insert("mild_fraction".into(), c.schedule.mild_fraction.into());
        self.set("corpus", t)
    }

    pub fn model(&mut self, m: &DenoiserConfig) -> &mut Self {
        let mut t = toml::Table::new();
        t.insert("resolution".into(), (m.resolution as i64).into());
        t.insert("widths".into(), m.widths.iter().map(|&w| w as i64).collect::<Vec<_>>().into());
        t.insert("mode".into(), m.mode.to_string().into());
        t.insert("emb_dim".into(), (m.emb_dim as i64).into());
        t.insert("num_classes".into(), (m.num_classes as i64).into());
        t.insert("timesteps".into(), (m.timesteps as i64).into());
        t.insert("cond_bands".into(), (m.cond_bands as i64).into());
        self.set("model", t)
    }

    pub fn render(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("# unprintable configuration: {e}\n"))
    }
}
