//! Cosine noise schedule and the forward (noising) process.

use rand::Rng;
use rand_distr::StandardNormal;

/// Offset of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clip on per-step noise.
pub const MAX_BETA: f64 = 0.999;

/// `alpha_bar[t]` for training steps `t = 0..T-1`; step `t` is the
/// `(t + 1)`-th noising step.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn cosine(steps: usize) -> Self {
        let f = |t: f64| {
            let a = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
            a.cos().powi(2)
        };
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for i in 1..=steps {
            let beta = (1.0 - f(i as f64) / f((i - 1) as f64)).min(MAX_BETA);
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Self { alpha_bar }
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `count` training steps evenly spaced from `T-1` down to `0`,
    /// in sampling order.
    pub fn respaced(&self, count: usize) -> Vec<usize> {
        let t = self.steps();
        let count = count.clamp(1, t);
        if count == 1 {
            return vec![t - 1];
        }
        let mut out: Vec<usize> = (0..count)
            .map(|i| ((i as f64) * (t - 1) as f64 / (count - 1) as f64).round() as usize)
            .collect();
        out.dedup();
        out.reverse();
        out
    }

    /// `x_t = sqrt(abar) x0 + sqrt(1 - abar) eps` in place; returns `eps`.
    pub fn add_noise<R: Rng + ?Sized>(&self, x0: &mut [f32], t: usize, rng: &mut R) -> Vec<f32> {
        let ab = self.alpha_bar[t];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.iter_mut()
            .map(|x| {
                let e: f64 = rng.sample(StandardNormal);
                *x = (a * *x as f64 + b * e) as f32;
                e as f32
            })
            .collect()
    }
}

/// Standard normal `f32` draws.
pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect()
}
