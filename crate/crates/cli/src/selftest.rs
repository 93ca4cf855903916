//! Fast numerical checks runnable from the command line.

use ndarray::Array2;
use rand::Rng;

use geocond::attention::{duplication_oracle, reweighted_attention, AttentionBatch};
use geocond::evalfid::ReportLine;
use geocond::lens::{draw_rng, sample_lens_params};
use geocond::sphere::sphere_metric_pack;
use geocond::{density, pullback_metric, warp_field_from_lens, FieldFile, MetricField};

use crate::error::Result;

fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-2.0..2.0))
}

/// Largest gap between score reweighting and physical token duplication
/// over `cases` random problems with integer densities in 1..=5.
pub fn duplication_gap(seed: u64, cases: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..cases {
        let mut rng = draw_rng(seed, i as u64);
        let n = rng.random_range(1..=8);
        let dim = rng.random_range(1..=16);
        let q = random_matrix(&mut rng, n, dim);
        let k = random_matrix(&mut rng, n, dim);
        let v = random_matrix(&mut rng, n, dim);
        let mult: Vec<u32> = (0..n).map(|_| rng.random_range(1..=5)).collect();
        let d: Vec<f64> = mult.iter().map(|&m| m as f64).collect();
        let oracle = duplication_oracle(q.view(), k.view(), v.view(), &mult)?;
        let out = reweighted_attention(&AttentionBatch::uniform(q, k, v).with_densities(&d)?)?;
        worst = (&out - &oracle).iter().fold(worst, |m, x| m.max(x.abs()));
    }
    Ok(worst)
}

/// Largest output change when every density is multiplied by 0.1 or 10.
pub fn scale_invariance_gap(seed: u64, cases: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..cases {
        let mut rng = draw_rng(seed ^ 0x5ca1e, i as u64);
        let n = rng.random_range(1..=16);
        let q = random_matrix(&mut rng, n, 8);
        let k = random_matrix(&mut rng, n, 8);
        let v = random_matrix(&mut rng, n, 8);
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..4.0)).collect();
        let batch = AttentionBatch::uniform(q, k, v);
        let base = reweighted_attention(&batch.clone().with_densities(&d)?)?;
        for c in [0.1, 10.0] {
            let scaled: Vec<f64> = d.iter().map(|x| x * c).collect();
            let out = reweighted_attention(&batch.clone().with_densities(&scaled)?)?;
            worst = (&out - &base).iter().fold(worst, |m, x| m.max(x.abs()));
        }
    }
    Ok(worst)
}

/// Largest relative gap between det g and density squared over random
/// sampler lenses.
pub fn metric_density_gap(seed: u64, fields: usize, res: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..fields {
        let mut rng = draw_rng(seed ^ 0xde7, i as u64);
        let progress = rng.random::<f64>();
        let lens = sample_lens_params(&mut rng, progress);
        let field = warp_field_from_lens(&lens, res, res)?;
        let g = pullback_metric(&field)?;
        let d = density(&field)?;
        for (s, &dv) in g.values.iter().zip(d.values()) {
            // The density floor only bites on folded pixels.
            if dv <= 1e-6 {
                continue;
            }
            worst = worst.max((s.det() - dv * dv).abs() / (dv * dv));
        }
    }
    Ok(worst)
}

/// Largest deviation of the sphere metric from `diag(sin^2 theta, 1)`
/// after a trip through the field-file format.
pub fn sphere_file_gap(height: usize, width: usize) -> Result<f64> {
    let (metric, _) = sphere_metric_pack(height, width)?;
    let mut buf = Vec::new();
    FieldFile::from(&metric).write_to(&mut buf)?;
    let back = MetricField::try_from(&FieldFile::read_from(buf.as_slice())?)?;
    let mut worst: f64 = 0.0;
    for h in 0..height {
        let s = (std::f64::consts::PI * h as f64 / height as f64).sin();
        for w in 0..width {
            let m = back.at(w, h);
            // f32 storage limits the match to single precision.
            worst = worst
                .max((m.g11 - s * s).abs())
                .max((m.g22 - 1.0).abs())
                .max(m.g12.abs())
                .max((m.det() - s * s).abs());
        }
    }
    Ok(worst)
}

pub fn run(seed: u64, cases: usize) -> Result<Vec<ReportLine>> {
    let line = |metric: &str, value: f64, tol: f64| ReportLine {
        metric: metric.into(),
        value,
        tolerance: format!("<={tol:e}"),
        pass: value <= tol,
    };
    Ok(vec![
        line("duplication_max_abs_diff", duplication_gap(seed, cases)?, 1e-6),
        line("density_scale_max_abs_diff", scale_invariance_gap(seed, cases.min(200))?, 1e-9),
        line("metric_det_vs_density_sq_rel", metric_density_gap(seed, 20, 32)?, 1e-6),
        line("sphere_metric_file_max_abs_diff", sphere_file_gap(32, 64)?, 1e-6),
    ])
}
