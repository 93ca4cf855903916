//! Per-pixel geometry conditioning for image models.
//!
//! A [`WarpField`] stores, for every output pixel, where it samples the
//! undistorted frame in normalized coordinates. From it we derive densities
//! and pullback metrics ([`differential`]), resample images ([`resample`]),
//! reweight self-attention ([`attention`]) and measure geometric fidelity
//! ([`evalfid`]).

pub mod attention;
pub mod conditioning;
pub mod datagen;
pub mod differential;
pub mod error;
pub mod evalfid;
pub mod fieldfile;
pub mod grid;
pub mod lens;
pub mod resample;
pub mod sphere;

pub use conditioning::{ConditioningMode, ConditioningPack};
pub use differential::{density, jacobian, pullback_metric, DensityMap, MetricField, MetricSample};
pub use error::{Error, Result};
pub use fieldfile::FieldFile;
pub use grid::{normalized_grid, Frame, NormalizedPoint, WarpField};
pub use lens::{sample_lens_params, warp_field_from_lens, LensParams};
pub use resample::{remap, unwarp, Coverage, Image};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/fields.md")]
    struct Fields;
    #[doc = include_str!("../../../book/src/geometry.md")]
    struct Geometry;
    #[doc = include_str!("../../../book/src/attention.md")]
    struct Attention;
    #[doc = include_str!("../../../book/src/resampling.md")]
    struct Resampling;
    #[doc = include_str!("../../../book/src/sphere.md")]
    struct Sphere;
    #[doc = include_str!("../../../book/src/corpus.md")]
    struct Corpus;
}
