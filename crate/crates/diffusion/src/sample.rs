//! Ancestral sampling over a respaced subset of the training steps.

use candle_core::{Device, Tensor};

use geocond::lens::draw_rng;
use geocond::sphere::seam_blend;
use geocond::{ConditioningPack, Image};

use crate::batch::{cond_tensors, model_to_image};
use crate::error::{DiffusionError, Result};
use crate::model::{Denoiser, ModelInput};
use crate::schedule::{gaussian, DiffusionSchedule};

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOptions {
    pub steps: usize,
    pub seed: u64,
    /// When set, the right border of the running estimate is overwritten by
    /// the left border after every step.
    pub seam_fraction: Option<f64>,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            steps: 50,
            seed: 0,
            seam_fraction: None,
        }
    }
}

/// Request for one image. `index` selects the sample's random stream, so a
/// sample does not depend on what else shares its batch.
#[derive(Debug, Clone, Copy)]
pub struct SampleRequest<'a> {
    pub pack: &'a ConditioningPack,
    pub class: usize,
    pub index: u64,
}

/// Generates one image per request with parameter values `params`. The
/// output size follows the packs, which must all share one size.
pub fn sample(
    model: &Denoiser,
    params: &[Tensor],
    schedule: &DiffusionSchedule,
    requests: &[SampleRequest<'_>],
    opts: &SampleOptions,
) -> Result<Vec<Image>> {
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    let cfg = model.config();
    if schedule.steps() != cfg.timesteps {
        return Err(DiffusionError::Config(format!(
            "schedule has {} steps, model was built for {}",
            schedule.steps(),
            cfg.timesteps
        )));
    }
    let (h, w, c) = (requests[0].pack.height, requests[0].pack.width, cfg.image_channels);
    let n = h * w * c;
    let b = requests.len();
    let packs: Vec<&ConditioningPack> = requests.iter().map(|q| q.pack).collect();
    let cond = cond_tensors(&packs, cfg)?;
    let classes: Vec<usize> = requests.iter().map(|q| q.class).collect();
    let mut rngs: Vec<_> = requests.iter().map(|q| draw_rng(opts.seed, q.index)).collect();
    let mut x: Vec<f32> = rngs.iter_mut().flat_map(|g| gaussian(g, n)).collect();
    let blend = |x: &mut [f32]| -> Result<()> {
        if let Some(f) = opts.seam_fraction {
            seam_blend(x, w, f)?;
        }
        Ok(())
    };
    blend(&mut x)?;

    let taus = schedule.respaced(opts.steps);
    for (i, &t) in taus.iter().enumerate() {
        let xt = Tensor::from_vec(x.clone(), (b, c, h, w), &Device::Cpu)?;
        let eps = model
            .forward_with(
                params,
                &ModelInput {
                    x: &xt,
                    timesteps: &vec![t; b],
                    classes: &classes,
                    cond: &cond.cond,
                    log_density: &cond.log_density,
                },
            )?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let ab = schedule.alpha_bar(t);
        let prev = taus.get(i + 1).map(|&tp| schedule.alpha_bar(tp));
        for (s, rng) in rngs.iter_mut().enumerate() {
            let xs = &mut x[s * n..(s + 1) * n];
            let es = &eps[s * n..(s + 1) * n];
            let x0: Vec<f64> = xs
                .iter()
                .zip(es)
                .map(|(&xv, &ev)| ((xv as f64 - (1.0 - ab).sqrt() * ev as f64) / ab.sqrt()).clamp(-1.0, 1.0))
                .collect();
            match prev {
                Some(abp) => {
                    let beta = 1.0 - ab / abp;
                    let c0 = abp.sqrt() * beta / (1.0 - ab);
                    let ct = (1.0 - beta).sqrt() * (1.0 - abp) / (1.0 - ab);
                    let sigma = ((1.0 - abp) / (1.0 - ab) * beta).sqrt();
                    let z = gaussian(rng, n);
                    for ((xv, &x0v), &zv) in xs.iter_mut().zip(&x0).zip(&z) {
                        *xv = (c0 * x0v + ct * *xv as f64 + sigma * zv as f64) as f32;
                    }
                }
                None => {
                    for (xv, &x0v) in xs.iter_mut().zip(&x0) {
                        *xv = x0v as f32;
                    }
                }
            }
        }
        blend(&mut x)?;
    }
    x.chunks(n).map(|s| model_to_image(s, h, w, c)).collect()
}
