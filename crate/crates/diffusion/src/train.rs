//! Noise-prediction training with AdamW and an exponential moving average
//! of the weights for sampling.

use candle_core::{Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;

use geocond::datagen::{make_training_sample, CorpusConfig};
use geocond::lens::draw_rng;
use geocond::{ConditioningPack, Image};

use crate::batch::{cond_tensors, image_to_model};
use crate::error::{DiffusionError, Result};
use crate::model::{snapshot, Denoiser, ModelInput};
use crate::schedule::DiffusionSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub ema_decay: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            warmup_steps: 100,
            ema_decay: 0.995,
            weight_decay: 0.0,
        }
    }
}

/// One training example: target image in `[0, 1]`, class and conditioning.
#[derive(Debug, Clone)]
pub struct Example {
    pub image: Image,
    pub class: usize,
    pub pack: ConditioningPack,
}

pub struct Trainer {
    model: Denoiser,
    schedule: DiffusionSchedule,
    optimizer: AdamW,
    ema: Vec<Tensor>,
    config: TrainConfig,
    step: usize,
}

impl Trainer {
    pub fn new(model: Denoiser, config: TrainConfig) -> Result<Self> {
        let schedule = DiffusionSchedule::cosine(model.config().timesteps);
        let optimizer = AdamW::new(
            model.vars().to_vec(),
            ParamsAdamW {
                lr: config.learning_rate,
                weight_decay: config.weight_decay,
                ..ParamsAdamW::default()
            },
        )?;
        let ema = snapshot(&model.tensors())?;
        Ok(Self {
            model,
            schedule,
            optimizer,
            ema,
            config,
            step: 0,
        })
    }

    /// Resumes from saved weights and their moving average.
    pub fn with_ema(mut self, ema: Vec<Tensor>, step: usize) -> Self {
        self.ema = ema;
        self.step = step;
        self
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn ema(&self) -> &[Tensor] {
        &self.ema
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Noise-prediction loss on `batch` at timesteps drawn from `rng`,
    /// returning the loss tensor.
    fn loss_tensor<R: Rng + ?Sized>(&self, params: &[Tensor], batch: &[Example], rng: &mut R) -> Result<Tensor> {
        if batch.is_empty() {
            return Err(DiffusionError::Shape("empty batch".into()));
        }
        let cfg = self.model.config();
        let r = cfg.resolution;
        let c = cfg.image_channels;
        let mut x = Vec::with_capacity(batch.len() * r * r * c);
        let mut eps = Vec::with_capacity(x.capacity());
        let mut ts = Vec::with_capacity(batch.len());
        for ex in batch {
            let mut x0 = image_to_model(&ex.image, cfg)?;
            let t = rng.random_range(0..self.schedule.steps());
            eps.extend(self.schedule.add_noise(&mut x0, t, rng));
            x.extend(x0);
            ts.push(t);
        }
        let b = batch.len();
        let x = Tensor::from_vec(x, (b, c, r, r), &Device::Cpu)?;
        let eps = Tensor::from_vec(eps, (b, c, r, r), &Device::Cpu)?;
        let packs: Vec<&ConditioningPack> = batch.iter().map(|e| &e.pack).collect();
        let cond = cond_tensors(&packs, cfg)?;
        let classes: Vec<usize> = batch.iter().map(|e| e.class).collect();
        let pred = self.model.forward_with(
            params,
            &ModelInput {
                x: &x,
                timesteps: &ts,
                classes: &classes,
                cond: &cond.cond,
                log_density: &cond.log_density,
            },
        )?;
        Ok((pred - eps)?.sqr()?.mean_all()?)
    }

    /// Loss of the current weights without updating them.
    pub fn evaluate<R: Rng + ?Sized>(&self, batch: &[Example], rng: &mut R) -> Result<f32> {
        let p = snapshot(&self.model.tensors())?;
        Ok(self.loss_tensor(&p, batch, rng)?.to_scalar::<f32>()?)
    }

    /// One optimizer step; returns the batch loss before the update.
    pub fn train_step<R: Rng + ?Sized>(&mut self, batch: &[Example], rng: &mut R) -> Result<f32> {
        let warm = ((self.step + 1) as f64 / self.config.warmup_steps.max(1) as f64).min(1.0);
        self.optimizer.set_learning_rate(self.config.learning_rate * warm);
        let loss = self.loss_tensor(&self.model.tensors(), batch, rng)?;
        self.optimizer.backward_step(&loss)?;
        self.step += 1;
        let d = self.config.ema_decay.min((1 + self.step) as f64 / (10 + self.step) as f64);
        self.ema = self
            .ema
            .iter()
            .zip(self.model.tensors())
            .map(|(e, p)| Ok(((e * d)? + (p.detach() * (1.0 - d))?)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(loss.to_scalar::<f32>()?)
    }
}

/// Length and randomness of a training run over a procedural corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRun {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Trains on fresh corpus samples until the trainer has taken `run.steps`
/// steps. Step `s` draws its batch and noise from stream `s` of `run.seed`,
/// so a resumed run sees the data the uninterrupted run would have (the
/// optimizer moments restart, as checkpoints do not store them). The warp
/// schedule sees progress `s / run.steps`. `on_step` receives the step
/// count and batch loss after every update.
pub fn fit(
    trainer: &mut Trainer,
    corpus: &CorpusConfig,
    run: &TrainRun,
    mut on_step: impl FnMut(usize, f32),
) -> Result<()> {
    if run.batch_size == 0 {
        return Err(DiffusionError::Config("batch size must be positive".into()));
    }
    corpus.validate()?;
    if corpus.mode != trainer.model().config().mode {
        return Err(DiffusionError::Config(format!(
            "corpus mode {} but model mode {}",
            corpus.mode,
            trainer.model().config().mode
        )));
    }
    let res = trainer.model().config().resolution;
    while trainer.step() < run.steps {
        let s = trainer.step();
        let mut rng = draw_rng(run.seed, s as u64);
        let progress = s as f64 / run.steps as f64;
        let batch = (0..run.batch_size)
            .map(|_| {
                let t = make_training_sample(&mut rng, progress, res, corpus)?;
                Ok(Example {
                    image: t.image,
                    class: t.class,
                    pack: t.pack,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = trainer.train_step(&batch, &mut rng)?;
        on_step(trainer.step(), loss);
    }
    Ok(())
}
