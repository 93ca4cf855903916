//! Encoder-decoder denoiser over a 64x64-class grid.
//!
//! Resolutions `R`, `R/4` and `R/8`. The full-resolution level holds the
//! input stem (image and conditioning convolutions, summed) and the output
//! head; the two coarse levels hold residual blocks and density-reweighted
//! self-attention. Levels are connected by pixel (un)shuffling followed by
//! a 1x1 projection.

use candle_core::{Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use geocond::ConditioningMode;

use crate::error::{DiffusionError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub resolution: usize,
    pub image_channels: usize,
    pub mode: ConditioningMode,
    pub num_classes: usize,
    /// Channels at `R`, `R/4`, `R/8`.
    pub widths: [usize; 3],
    pub emb_dim: usize,
    pub groups: usize,
    /// Training diffusion steps.
    pub timesteps: usize,
    /// Octave bands of the fixed sinusoidal lift applied to every
    /// conditioning channel before the input convolution; 0 feeds the
    /// channels raw.
    pub cond_bands: usize,
    pub init_seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            image_channels: 1,
            mode: ConditioningMode::Positional,
            num_classes: 2,
            widths: [16, 64, 96],
            emb_dim: 128,
            groups: 8,
            timesteps: 200,
            cond_bands: 6,
            init_seed: 0,
        }
    }
}

/// Pooling factors of the attention resolutions.
pub const ATTENTION_FACTORS: [usize; 2] = [4, 8];
const TIME_FEATURES: usize = 64;
pub const MAX_COND_BANDS: usize = 12;

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if r < 8 || r % 8 != 0 {
            return Err(DiffusionError::Config(format!("resolution {r} must be a positive multiple of 8")));
        }
        if self.widths.iter().any(|&w| w == 0 || w % self.groups != 0) {
            return Err(DiffusionError::Config(format!(
                "widths {:?} must be multiples of groups {}",
                self.widths, self.groups
            )));
        }
        if self.cond_bands > MAX_COND_BANDS {
            return Err(DiffusionError::Config(format!(
                "cond_bands {} exceeds {MAX_COND_BANDS}",
                self.cond_bands
            )));
        }
        if self.num_classes == 0 || self.image_channels == 0 || self.timesteps < 2 {
            return Err(DiffusionError::Config("classes, channels and timesteps must be positive".into()));
        }
        Ok(())
    }

    pub fn cond_channels(&self) -> usize {
        self.mode.channels()
    }

    /// Channels seen by the conditioning convolution: each raw channel
    /// plus a sine and cosine per band.
    pub fn cond_features(&self) -> usize {
        self.cond_channels() * (1 + 2 * self.cond_bands)
    }

    /// `(height, width)` of each attention level, coarse levels in order.
    pub fn attention_levels(&self) -> Vec<(usize, usize)> {
        self.levels_for(self.resolution, self.resolution)
    }

    /// Attention levels of a `height x width` input. The network is fully
    /// convolutional, so any multiple of 8 works at inference.
    pub fn levels_for(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        ATTENTION_FACTORS.iter().map(|f| (height / f, width / f)).collect()
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform(f64),
    Zeros,
    Ones,
}

struct Builder {
    rng: ChaCha8Rng,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> Result<usize> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Uniform(b) => (0..n).map(|_| self.rng.random_range(-b..b) as f32).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        self.tensors.push(Tensor::from_vec(data, shape, &Device::Cpu)?);
        self.names.push(name);
        Ok(self.tensors.len() - 1)
    }

    fn conv3(&mut self, name: &str, cin: usize, cout: usize, zero: bool, bias: bool) -> Result<Conv3> {
        let bound = (3.0 / (9 * cin) as f64).sqrt();
        let w = self.add(format!("{name}.weight"), &[cout, cin * 9], if zero { Init::Zeros } else { Init::Uniform(bound) })?;
        let b = if bias {
            Some(self.add(format!("{name}.bias"), &[cout], Init::Zeros)?)
        } else {
            None
        };
        Ok(Conv3 { w, b })
    }

    fn dense(&mut self, name: &str, cin: usize, cout: usize) -> Result<Dense> {
        let bound = (3.0 / cin as f64).sqrt();
        let w = self.add(format!("{name}.weight"), &[cout, cin], Init::Uniform(bound))?;
        let b = self.add(format!("{name}.bias"), &[cout], Init::Zeros)?;
        Ok(Dense { w, b })
    }

    fn norm(&mut self, name: &str, c: usize, groups: usize) -> Result<Norm> {
        let g = self.add(format!("{name}.gamma"), &[c], Init::Ones)?;
        let b = self.add(format!("{name}.beta"), &[c], Init::Zeros)?;
        Ok(Norm { g, b, groups })
    }

    fn res(&mut self, name: &str, c: usize, emb: usize, groups: usize) -> Result<ResBlock> {
        Ok(ResBlock {
            n1: self.norm(&format!("{name}.norm1"), c, groups)?,
            c1: self.conv3(&format!("{name}.conv1"), c, c, false, true)?,
            e: self.dense(&format!("{name}.emb"), emb, c)?,
            n2: self.norm(&format!("{name}.norm2"), c, groups)?,
            c2: self.conv3(&format!("{name}.conv2"), c, c, false, true)?,
        })
    }

    fn attn(&mut self, name: &str, c: usize, groups: usize) -> Result<Attention> {
        Ok(Attention {
            n: self.norm(&format!("{name}.norm"), c, groups)?,
            qkv: self.dense(&format!("{name}.qkv"), c, 3 * c)?,
            proj: self.dense(&format!("{name}.proj"), c, c)?,
            channels: c,
        })
    }
}

/// 3x3 same-padding convolution via explicit patch extraction and one
/// matrix product. Weight layout `(cout, cin * 9)`, patch index `ci * 9 + k`.
#[derive(Debug, Clone, Copy)]
struct Conv3 {
    w: usize,
    b: Option<usize>,
}

impl Conv3 {
    fn forward(&self, p: &[Tensor], x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let xp = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut cols = Vec::with_capacity(9);
        for dy in 0..3 {
            for dx in 0..3 {
                cols.push(xp.narrow(2, dy, h)?.narrow(3, dx, w)?);
            }
        }
        let col = Tensor::stack(&cols, 2)?.reshape((b, c * 9, h * w))?;
        let cout = p[self.w].dim(0)?;
        let mut y = p[self.w].broadcast_matmul(&col)?;
        if let Some(bias) = self.b {
            y = y.broadcast_add(&p[bias].reshape((1, cout, 1))?)?;
        }
        Ok(y.reshape((b, cout, h, w))?)
    }
}

/// Affine map on channels: `(B, in)` vectors or `(B, in, N)` token stacks.
#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
}

impl Dense {
    fn vectors(&self, p: &[Tensor], x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&p[self.w].t()?)?.broadcast_add(&p[self.b])?)
    }

    fn tokens(&self, p: &[Tensor], x: &Tensor) -> Result<Tensor> {
        let cout = p[self.w].dim(0)?;
        Ok(p[self.w].broadcast_matmul(x)?.broadcast_add(&p[self.b].reshape((1, cout, 1))?)?)
    }

    /// 1x1 convolution on `(B, C, H, W)`.
    fn pointwise(&self, p: &[Tensor], x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let y = self.tokens(p, &x.reshape((b, c, h * w))?)?;
        let cout = y.dim(1)?;
        Ok(y.reshape((b, cout, h, w))?)
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: usize,
    b: usize,
    groups: usize,
}

impl Norm {
    fn forward(&self, p: &[Tensor], x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let xr = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = xr.mean_keepdim(2)?;
        let xc = xr.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(2)?;
        let xn = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?.reshape((b, c, h, w))?;
        Ok(xn
            .broadcast_mul(&p[self.g].reshape((1, c, 1, 1))?)?
            .broadcast_add(&p[self.b].reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    n1: Norm,
    c1: Conv3,
    e: Dense,
    n2: Norm,
    c2: Conv3,
}

impl ResBlock {
    fn forward(&self, p: &[Tensor], x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let h = self.c1.forward(p, &self.n1.forward(p, x)?.silu()?)?;
        let (b, c, _, _) = h.dims4()?;
        let e = self.e.vectors(p, emb)?.reshape((b, c, 1, 1))?;
        let h = h.broadcast_add(&e)?;
        let h = self.c2.forward(p, &self.n2.forward(p, &h)?.silu()?)?;
        Ok((x + h)?)
    }
}

/// Single-head self-attention whose scores toward key `j` are shifted by
/// `log_density[j]`.
#[derive(Debug, Clone, Copy)]
struct Attention {
    n: Norm,
    qkv: Dense,
    proj: Dense,
    channels: usize,
}

impl Attention {
    fn forward(&self, p: &[Tensor], x: &Tensor, log_density: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let n = h * w;
        let tokens = self.n.forward(p, x)?.reshape((b, c, n))?;
        let qkv = self.qkv.tokens(p, &tokens)?;
        let q = qkv.narrow(1, 0, c)?;
        let k = qkv.narrow(1, c, c)?;
        let v = qkv.narrow(1, 2 * c, c)?;
        let scale = 1.0 / (self.channels as f64).sqrt();
        let scores = (q.transpose(1, 2)?.contiguous()?.matmul(&k)? * scale)?;
        let scores = scores.broadcast_add(log_density)?;
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = v.matmul(&weights.transpose(1, 2)?.contiguous()?)?;
        let out = self.proj.tokens(p, &out)?.reshape((b, c, h, w))?;
        Ok((x + out)?)
    }
}

fn unshuffle(x: &Tensor, f: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h / f, f, w / f, f))?
        .permute((0, 1, 3, 5, 2, 4))?
        .contiguous()?
        .reshape((b, c * f * f, h / f, w / f))?)
}

fn shuffle(x: &Tensor, f: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let co = c / (f * f);
    Ok(x.reshape((b, co, f, f, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .contiguous()?
        .reshape((b, co, h * f, w * f))?)
}

#[derive(Debug, Clone)]
struct Layers {
    stem_x: Conv3,
    stem_cond: Conv3,
    time1: Dense,
    time2: Dense,
    class_emb: usize,
    down1: Dense,
    res1: ResBlock,
    attn1: Attention,
    down2: Dense,
    res2: ResBlock,
    attn2: Attention,
    res3: ResBlock,
    up2: Dense,
    res4: ResBlock,
    attn3: Attention,
    up1: Dense,
    head_norm: Norm,
    head1: Conv3,
    head2: Conv3,
}

/// Inputs of one forward pass. Images and conditioning are planar
/// `(B, C, R, R)`; `log_density[l]` is `(B, 1, N_l)`.
pub struct ModelInput<'a> {
    pub x: &'a Tensor,
    pub timesteps: &'a [usize],
    pub classes: &'a [usize],
    pub cond: &'a Tensor,
    pub log_density: &'a [Tensor],
}

/// Architecture plus the trainable parameters.
pub struct Denoiser {
    config: DenoiserConfig,
    layers: Layers,
    names: Vec<String>,
    vars: Vec<Var>,
}

impl Denoiser {
    /// Fresh model with deterministic initialization from `config.init_seed`.
    /// Conditioning input weights start at zero.
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let [c0, c1, c2] = config.widths;
        let (e, g) = (config.emb_dim, config.groups);
        let mut bld = Builder {
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
            names: Vec::new(),
            tensors: Vec::new(),
        };
        let layers = Layers {
            stem_x: bld.conv3("stem_x", config.image_channels, c0, false, true)?,
            stem_cond: bld.conv3("stem_cond", config.cond_features(), c0, true, false)?,
            time1: bld.dense("time1", TIME_FEATURES, e)?,
            time2: bld.dense("time2", e, e)?,
            class_emb: bld.add("class_emb".into(), &[config.num_classes, e], Init::Uniform(1.0))?,
            down1: bld.dense("down1", c0 * 16, c1)?,
            res1: bld.res("res1", c1, e, g)?,
            attn1: bld.attn("attn1", c1, g)?,
            down2: bld.dense("down2", c1 * 4, c2)?,
            res2: bld.res("res2", c2, e, g)?,
            attn2: bld.attn("attn2", c2, g)?,
            res3: bld.res("res3", c2, e, g)?,
            up2: bld.dense("up2", c2, c1 * 4)?,
            res4: bld.res("res4", c1, e, g)?,
            attn3: bld.attn("attn3", c1, g)?,
            up1: bld.dense("up1", c1, c0 * 16)?,
            head_norm: bld.norm("head_norm", c0, g)?,
            head1: bld.conv3("head1", c0, c0, false, true)?,
            head2: bld.conv3("head2", c0, config.image_channels, false, true)?,
        };
        let vars = bld
            .tensors
            .iter()
            .map(Var::from_tensor)
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            config,
            layers,
            names: bld.names,
            vars,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Current parameter values, in declaration order.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.vars.iter().map(|v| v.as_tensor().clone()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.vars.iter().map(|v| v.elem_count()).sum()
    }

    /// Overwrites parameters; shapes must match.
    pub fn load(&self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.vars.len() {
            return Err(DiffusionError::Shape(format!(
                "{} tensors for {} parameters",
                values.len(),
                self.vars.len()
            )));
        }
        for ((var, v), name) in self.vars.iter().zip(values).zip(&self.names) {
            if var.dims() != v.dims() {
                return Err(DiffusionError::Shape(format!(
                    "{name}: expected {:?}, got {:?}",
                    var.dims(),
                    v.dims()
                )));
            }
            var.set(v)?;
        }
        Ok(())
    }

    /// Predicted noise `(B, image_channels, H, W)` using parameter values `p`
    /// (the model's own [`Denoiser::tensors`] or an averaged copy).
    pub fn forward_with(&self, p: &[Tensor], input: &ModelInput<'_>) -> Result<Tensor> {
        let l = &self.layers;
        let b = input.x.dim(0)?;
        if input.timesteps.len() != b || input.classes.len() != b {
            return Err(DiffusionError::Shape("timesteps and classes must match the batch".into()));
        }
        if let Some(&c) = input.classes.iter().find(|&&c| c >= self.config.num_classes) {
            return Err(DiffusionError::Shape(format!("class {c} out of range")));
        }
        let (_, _, h, w) = input.x.dims4()?;
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(DiffusionError::Shape(format!("input {h}x{w} is not a multiple of 8")));
        }
        let expect = [(b, self.config.image_channels, h, w), (b, self.config.cond_channels(), h, w)];
        if input.x.dims4()? != expect[0] || input.cond.dims4()? != expect[1] {
            return Err(DiffusionError::Shape(format!(
                "inputs {:?} and {:?}, model expects {:?}",
                input.x.dims(),
                input.cond.dims(),
                expect
            )));
        }
        let levels = self.config.levels_for(h, w);
        if input.log_density.len() != levels.len()
            || input
                .log_density
                .iter()
                .zip(&levels)
                .any(|(t, (h, w))| t.dims() != [b, 1, h * w])
        {
            return Err(DiffusionError::Shape("log-density pyramid does not match the attention levels".into()));
        }

        let temb = time_features(input.timesteps)?;
        let emb = l.time2.vectors(p, &l.time1.vectors(p, &temb)?.silu()?)?;
        let ids = Tensor::from_vec(input.classes.iter().map(|&c| c as u32).collect::<Vec<_>>(), b, &Device::Cpu)?;
        let emb = (emb + p[l.class_emb].index_select(&ids, 0)?)?;

        let cond = lift(input.cond, self.config.cond_bands)?;
        let h0 = (l.stem_x.forward(p, input.x)? + l.stem_cond.forward(p, &cond)?)?;
        let d1 = l.down1.pointwise(p, &unshuffle(&h0, 4)?)?;
        let r1 = l.res1.forward(p, &d1, &emb)?;
        let r1 = l.attn1.forward(p, &r1, &input.log_density[0])?;
        let d2 = l.down2.pointwise(p, &unshuffle(&r1, 2)?)?;
        let m = l.res2.forward(p, &d2, &emb)?;
        let m = l.attn2.forward(p, &m, &input.log_density[1])?;
        let m = l.res3.forward(p, &m, &emb)?;
        let u1 = (shuffle(&l.up2.pointwise(p, &m)?, 2)? + r1)?;
        let u1 = l.res4.forward(p, &u1, &emb)?;
        let u1 = l.attn3.forward(p, &u1, &input.log_density[0])?;
        let u0 = (shuffle(&l.up1.pointwise(p, &u1)?, 4)? + h0)?;
        let o = l.head1.forward(p, &l.head_norm.forward(p, &u0)?.silu()?)?;
        l.head2.forward(p, &o.silu()?)
    }

    pub fn forward(&self, input: &ModelInput<'_>) -> Result<Tensor> {
        self.forward_with(&self.tensors(), input)
    }
}

/// `[c, sin(2^k pi c), cos(2^k pi c)]` for `k < bands`, stacked on the
/// channel axis. Raw coordinates only give a small network a linear ramp;
/// the bands let it draw periodic content along the field's level lines.
fn lift(cond: &Tensor, bands: usize) -> Result<Tensor> {
    let mut parts = vec![cond.clone()];
    for k in 0..bands {
        let scaled = (cond * (std::f64::consts::PI * (1u64 << k) as f64))?;
        parts.push(scaled.sin()?);
        parts.push(scaled.cos()?);
    }
    Ok(Tensor::cat(&parts, 1)?)
}

/// Sinusoidal features of the timestep index, `(B, 64)`.
fn time_features(t: &[usize]) -> Result<Tensor> {
    let half = TIME_FEATURES / 2;
    let mut data = Vec::with_capacity(t.len() * TIME_FEATURES);
    for &ti in t {
        for k in 0..half {
            let f = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            data.push((ti as f64 * f).sin() as f32);
        }
        for k in 0..half {
            let f = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            data.push((ti as f64 * f).cos() as f32);
        }
    }
    Ok(Tensor::from_vec(data, (t.len(), TIME_FEATURES), &Device::Cpu)?)
}

/// Detached copies of `tensors`.
pub fn snapshot(tensors: &[Tensor]) -> Result<Vec<Tensor>> {
    tensors
        .iter()
        .map(|t| Ok(t.detach().copy()?))
        .collect()
}
