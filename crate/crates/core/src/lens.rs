//! Brown-Conrady lens distortion and the randomized training-time sampler.
//!
//! The distortion polynomial is used as a *backward* map: an output pixel at
//! normalized position `p` depicts the undistorted point `distort_point(p)`.
//! That is exactly what a [`WarpField`] stores and what remapping consumes,
//! so no numerical inversion is needed to synthesize distorted images.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{Frame, NormalizedPoint, WarpField};

/// Radial (`k1`, `k2`) and tangential (`p1`, `p2`) coefficients about a
/// focal center given in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LensParams {
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
    pub cx: f64,
    pub cy: f64,
    /// Isotropic focal scale applied around the focal center. The sampler
    /// always leaves it at 1.
    pub focal: f64,
}

impl Default for LensParams {
    fn default() -> Self {
        Self::identity()
    }
}

impl LensParams {
    pub const fn identity() -> Self {
        Self {
            k1: 0.0,
            k2: 0.0,
            p1: 0.0,
            p2: 0.0,
            cx: 0.5,
            cy: 0.5,
            focal: 1.0,
        }
    }

    /// Pure radial `k1` lens centered in the unit square.
    pub const fn radial(k1: f64) -> Self {
        Self {
            k1,
            ..Self::identity()
        }
    }

    pub fn has_distortion(&self) -> bool {
        self.k1 != 0.0 || self.k2 != 0.0 || self.p1 != 0.0 || self.p2 != 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.entries() {
            if !v.is_finite() {
                return Err(Error::param(name, "must be finite"));
            }
        }
        if self.focal <= 0.0 {
            return Err(Error::param("focal", "must be positive"));
        }
        Ok(())
    }

    fn entries(&self) -> [(&'static str, f64); 7] {
        [
            ("k1", self.k1),
            ("k2", self.k2),
            ("p1", self.p1),
            ("p2", self.p2),
            ("cx", self.cx),
            ("cy", self.cy),
            ("focal", self.focal),
        ]
    }
}

/// Flat `key=value` record, one entry per line.
impl fmt::Display for LensParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, v) in self.entries() {
            writeln!(f, "{name}={v:?}")?;
        }
        Ok(())
    }
}

impl FromStr for LensParams {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut lens = LensParams::identity();
        for line in s.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::param(line, "expected `key=value`"))?;
            let key = key.trim();
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::param(key, format!("`{}` is not a decimal number", value.trim())))?;
            let slot = match key {
                "k1" => &mut lens.k1,
                "k2" => &mut lens.k2,
                "p1" => &mut lens.p1,
                "p2" => &mut lens.p2,
                "cx" => &mut lens.cx,
                "cy" => &mut lens.cy,
                "focal" => &mut lens.focal,
                other => return Err(Error::param(other, "unknown lens key")),
            };
            *slot = value;
        }
        lens.validate()?;
        Ok(lens)
    }
}

/// Applies the Brown-Conrady polynomial about the lens focal center.
pub fn distort_point(p: NormalizedPoint, lens: &LensParams) -> NormalizedPoint {
    if !lens.has_distortion() {
        return p;
    }
    let x = (p.u - lens.cx) / lens.focal;
    let y = (p.v - lens.cy) / lens.focal;
    let r2 = x * x + y * y;
    let radial = 1.0 + lens.k1 * r2 + lens.k2 * r2 * r2;
    let xd = x * radial + 2.0 * lens.p1 * x * y + lens.p2 * (r2 + 2.0 * x * x);
    let yd = y * radial + lens.p1 * (r2 + 2.0 * y * y) + 2.0 * lens.p2 * x * y;
    NormalizedPoint {
        u: lens.cx + lens.focal * xd,
        v: lens.cy + lens.focal * yd,
    }
}

/// Warp field whose coordinates are the lens-distorted normalized grid.
pub fn warp_field_from_lens(lens: &LensParams, height: usize, width: usize) -> Result<WarpField> {
    lens.validate()?;
    let frame = Frame::new(height, width)?;
    WarpField::from_fn(height, width, |x, y| {
        distort_point(frame.to_normalized(x as f64, y as f64), lens)
    })
}

/// Two-stage schedule for the global distortion scale `S`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpSchedule {
    /// Fraction of training spent on the mild distribution.
    pub mild_fraction: f64,
    pub mild_scale: (f64, f64),
    pub aggressive_scale: (f64, f64),
    pub no_distortion_prob: f64,
    /// Side of the centered box the focal center is drawn from.
    pub center_box: f64,
}

impl Default for WarpSchedule {
    fn default() -> Self {
        Self {
            mild_fraction: 0.8,
            mild_scale: (0.0, 4.0),
            aggressive_scale: (4.0, 10.0),
            no_distortion_prob: 0.3,
            center_box: 0.3,
        }
    }
}

impl WarpSchedule {
    pub fn scale_range(&self, progress: f64) -> (f64, f64) {
        if progress < self.mild_fraction {
            self.mild_scale
        } else {
            self.aggressive_scale
        }
    }
}

/// Per-branch coefficient ranges before global scaling.
pub const POSITIVE_RANGES: [(f64, f64); 4] = [(0.0, 5.0), (0.0, 1.5), (0.0, 0.05), (0.0, 0.05)];
pub const NEGATIVE_RANGES: [(f64, f64); 4] = [
    (-0.1, -0.05),
    (-0.06, -0.01),
    (0.0, 0.00035),
    (0.0, 0.00035),
];

/// One sampler draw: the lens and, when distorted, the global scale `S`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LensDraw {
    pub lens: LensParams,
    pub scale: Option<f64>,
}

/// Draws lens parameters with the default [`WarpSchedule`].
pub fn sample_lens_params<R: Rng + ?Sized>(rng: &mut R, progress: f64) -> LensParams {
    sample_lens_draw(&WarpSchedule::default(), rng, progress).lens
}

pub fn sample_lens_draw<R: Rng + ?Sized>(
    schedule: &WarpSchedule,
    rng: &mut R,
    progress: f64,
) -> LensDraw {
    let progress = progress.clamp(0.0, 1.0);
    if rng.random::<f64>() < schedule.no_distortion_prob {
        return LensDraw {
            lens: LensParams::identity(),
            scale: None,
        };
    }
    let ranges = if rng.random::<bool>() {
        &POSITIVE_RANGES
    } else {
        &NEGATIVE_RANGES
    };
    let (s_lo, s_hi) = schedule.scale_range(progress);
    let scale = uniform(rng, s_lo, s_hi);
    let [k1, k2, p1, p2] = ranges.map(|(lo, hi)| uniform(rng, lo, hi) * scale);
    let half = schedule.center_box / 2.0;
    let lens = LensParams {
        k1,
        k2,
        p1,
        p2,
        cx: uniform(rng, 0.5 - half, 0.5 + half),
        cy: uniform(rng, 0.5 - half, 0.5 + half),
        focal: 1.0,
    };
    LensDraw {
        lens,
        scale: Some(scale),
    }
}

/// Names the first parameter of `lens` lying outside what the sampler can
/// produce at `progress`, if any.
pub fn support_violation(
    schedule: &WarpSchedule,
    lens: &LensParams,
    progress: f64,
) -> Option<&'static str> {
    if lens.focal != 1.0 {
        return Some("focal");
    }
    if !lens.has_distortion() {
        return (lens.cx != 0.5 || lens.cy != 0.5).then_some("cx/cy");
    }
    let (s_lo, s_hi) = schedule.scale_range(progress.clamp(0.0, 1.0));
    let ranges = if lens.k1 > 0.0 {
        POSITIVE_RANGES
    } else {
        NEGATIVE_RANGES
    };
    let names = ["k1", "k2", "p1", "p2"];
    let coeffs = [lens.k1, lens.k2, lens.p1, lens.p2];
    for ((name, c), (lo, hi)) in names.into_iter().zip(coeffs).zip(ranges) {
        let ends = [lo * s_lo, lo * s_hi, hi * s_lo, hi * s_hi];
        let a = ends.iter().copied().fold(f64::INFINITY, f64::min);
        let b = ends.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if c < a || c > b {
            return Some(name);
        }
    }
    let half = schedule.center_box / 2.0;
    let inside = |c: f64| (0.5 - half..=0.5 + half).contains(&c);
    if !inside(lens.cx) {
        return Some("cx");
    }
    if !inside(lens.cy) {
        return Some("cy");
    }
    None
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Independent random stream for draw `index` of a run seeded with `seed`.
///
/// Streams depend only on `(seed, index)`, so results do not depend on how
/// draws are distributed over threads.
pub fn draw_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::normalized_grid;
    use proptest::prelude::*;

    #[test]
    fn zero_coefficients_are_the_identity() {
        let lens = LensParams::identity();
        for p in [(0.0, 0.0), (0.3, 0.9), (1.2, -0.4)] {
            let p = NormalizedPoint::new(p.0, p.1);
            assert_eq!(distort_point(p, &lens), p);
        }
    }

    #[test]
    fn focal_center_is_fixed() {
        let lens = LensParams {
            k1: 3.0,
            k2: -1.0,
            p1: 0.02,
            p2: 0.04,
            cx: 0.45,
            cy: 0.6,
            focal: 1.0,
        };
        let c = NormalizedPoint::new(0.45, 0.6);
        assert_eq!(distort_point(c, &lens), c);
    }

    #[test]
    fn hand_evaluated_radial_point() {
        let q = distort_point(NormalizedPoint::new(1.0, 0.5), &LensParams::radial(1.0));
        assert!((q.u - 1.125).abs() < 1e-15);
        assert_eq!(q.v, 0.5);
    }

    #[test]
    fn tangential_terms_follow_decentering_convention() {
        // x = 0.2, y = 0.1, r2 = 0.05
        let lens = LensParams {
            p1: 0.5,
            p2: 0.25,
            ..LensParams::identity()
        };
        let q = distort_point(NormalizedPoint::new(0.7, 0.6), &lens);
        let (x, y, r2) = (0.2f64, 0.1f64, 0.05f64);
        let xd = x + 2.0 * 0.5 * x * y + 0.25 * (r2 + 2.0 * x * x);
        let yd = y + 0.5 * (r2 + 2.0 * y * y) + 2.0 * 0.25 * x * y;
        assert!((q.u - (0.5 + xd)).abs() < 1e-15);
        assert!((q.v - (0.5 + yd)).abs() < 1e-15);
    }

    #[test]
    fn identity_iff_coefficients_vanish() {
        let probes: Vec<_> = (0..7)
            .flat_map(|i| (0..7).map(move |j| NormalizedPoint::new(i as f64 / 6.0, j as f64 / 6.0)))
            .collect();
        let moves = |lens: &LensParams| probes.iter().any(|&p| distort_point(p, lens) != p);
        assert!(!moves(&LensParams::identity()));
        for k in 0..4 {
            let mut c = [0.0; 4];
            c[k] = 1e-3;
            let lens = LensParams {
                k1: c[0],
                k2: c[1],
                p1: c[2],
                p2: c[3],
                ..LensParams::identity()
            };
            assert!(moves(&lens), "coefficient {k} alone must move some probe");
        }
    }

    #[test]
    fn zero_lens_field_is_the_normalized_grid() {
        let f = warp_field_from_lens(&LensParams::identity(), 24, 40).unwrap();
        assert_eq!(f, normalized_grid(24, 40).unwrap());
    }

    #[test]
    fn positive_k1_pushes_outward_monotonically_along_a_ray() {
        let f = warp_field_from_lens(&LensParams::radial(2.0), 65, 65).unwrap();
        let mut last = 0.0;
        for x in 33..65 {
            let p = f.at(x, 32);
            let r = p.u - 0.5;
            let r0 = x as f64 / 65.0 - 0.5;
            assert!(r > last, "radius must increase along the ray");
            assert!(r >= r0, "k1 > 0 samples farther out");
            last = r;
        }
    }

    #[test]
    fn radial_symmetry_at_equal_radius() {
        let lens = LensParams::radial(0.7);
        let r = 0.3;
        let reference = {
            let q = distort_point(NormalizedPoint::new(0.5 + r, 0.5), &lens);
            q.u - 0.5
        };
        for k in 0..16 {
            let a = k as f64 * std::f64::consts::TAU / 16.0;
            let p = NormalizedPoint::new(0.5 + r * a.cos(), 0.5 + r * a.sin());
            let q = distort_point(p, &lens);
            let rq = ((q.u - 0.5).powi(2) + (q.v - 0.5).powi(2)).sqrt();
            assert!((rq - reference).abs() < 1e-12);
        }
    }

    #[test]
    fn record_round_trip_and_errors() {
        let lens = LensParams {
            k1: 1.25,
            k2: -0.5,
            p1: 1e-4,
            p2: 0.03,
            cx: 0.41,
            cy: 0.58,
            focal: 1.0,
        };
        let back: LensParams = lens.to_string().parse().unwrap();
        assert_eq!(back, lens);
        let partial: LensParams = "k1=10\n".parse().unwrap();
        assert_eq!(partial, LensParams::radial(10.0));
        let err = "k1=1\nk9=2".parse::<LensParams>().unwrap_err();
        assert!(err.to_string().contains("k9"));
        let err = "k2=abc".parse::<LensParams>().unwrap_err();
        assert!(err.to_string().contains("k2"));
        assert!("focal=0".parse::<LensParams>().is_err());
    }

    #[test]
    fn sampler_frequencies_and_stage_scales() {
        let mut identity = 0usize;
        let mut positive = 0usize;
        let n = 10_000;
        for i in 0..n {
            let lens = sample_lens_params(&mut draw_rng(7, i), 0.3);
            if !lens.has_distortion() {
                identity += 1;
            } else if lens.k1 > 0.0 {
                positive += 1;
            }
        }
        let p_id = identity as f64 / n as f64;
        let p_pos = positive as f64 / (n as usize - identity) as f64;
        assert!((p_id - 0.3).abs() <= 0.02, "no-distortion rate {p_id}");
        assert!((p_pos - 0.5).abs() <= 0.02, "positive rate {p_pos}");
    }

    #[test]
    fn stage_selects_the_scale_distribution() {
        let schedule = WarpSchedule::default();
        let mut rng = draw_rng(1, 0);
        for (progress, lo, hi) in [(0.0, 0.0, 4.0), (0.79, 0.0, 4.0), (0.8, 4.0, 10.0), (0.9, 4.0, 10.0)] {
            for _ in 0..500 {
                if let Some(s) = sample_lens_draw(&schedule, &mut rng, progress).scale {
                    assert!((lo..=hi).contains(&s), "S = {s} at progress {progress}");
                }
            }
        }
    }

    #[test]
    fn support_check_flags_out_of_range_values() {
        let schedule = WarpSchedule::default();
        assert_eq!(support_violation(&schedule, &LensParams::identity(), 0.5), None);
        assert_eq!(support_violation(&schedule, &LensParams::radial(30.0), 0.5), Some("k1"));
        assert_eq!(support_violation(&schedule, &LensParams::radial(30.0), 0.9), None);
        let off_center = LensParams { k1: 1.0, cx: 0.1, ..LensParams::identity() };
        assert_eq!(support_violation(&schedule, &off_center, 0.5), Some("cx"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn sampler_respects_supports(seed in any::<u64>(), progress in 0.0f64..=1.0) {
            let mut rng = draw_rng(seed, 0);
            for _ in 0..200 {
                let lens = sample_lens_params(&mut rng, progress);
                prop_assert_eq!(support_violation(&WarpSchedule::default(), &lens, progress), None);
            }
        }
    }
}
