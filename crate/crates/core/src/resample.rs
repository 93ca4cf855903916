//! Applying, inverting, and cropping warp fields.
//!
//! All sampling is bilinear with pixel centers at integer positions. Samples
//! that land outside the source image are not clamped: they are reported as
//! uncovered and filled with zero.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{check_dims, normalized_grid, Frame, NormalizedPoint, WarpField};
use crate::lens::{warp_field_from_lens, LensParams};

/// Positions within this distance of an integer are treated as exact pixel
/// hits, so identity remaps copy pixels bit-for-bit. Wide enough to absorb
/// the rounding of fields stored as `f32` on frames up to a few thousand
/// pixels.
const SNAP: f64 = 1e-4;

/// Row-major, channel-interleaved image with real intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::from_vec(height, width, channels, vec![0.0; height * width * channels])
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, 2)?;
        if channels == 0 {
            return Err(Error::ShapeMismatch("image needs at least one channel".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image values"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Single-channel image from a closure over `(x, y)`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self::from_vec(height, width, 1, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Bilinear sample at continuous pixel position `(x, y)`; `false` when
    /// the position lies outside the image.
    pub fn sample_into(&self, x: f64, y: f64, out: &mut [f64]) -> bool {
        bilinear(&self.data, self.height, self.width, self.channels, x, y, out)
    }

    /// Peak signal-to-noise ratio in dB over pixels where `mask` is set,
    /// for intensities in `[0, 1]`.
    pub fn psnr(&self, other: &Image, mask: &Coverage) -> Result<f64> {
        self.check_same_shape(other)?;
        let mut se = 0.0;
        let mut n = 0usize;
        for (i, px) in self.data.chunks(self.channels).enumerate() {
            if !mask.mask[i] {
                continue;
            }
            let q = &other.data[i * self.channels..(i + 1) * self.channels];
            se += px.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            n += self.channels;
        }
        if n == 0 {
            return Err(Error::ShapeMismatch("PSNR over an empty mask".into()));
        }
        let mse = se / n as f64;
        Ok(if mse == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (1.0 / mse).log10()
        })
    }

    fn check_same_shape(&self, other: &Image) -> Result<()> {
        if (self.height, self.width, self.channels) != (other.height, other.width, other.channels) {
            return Err(Error::ShapeMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )));
        }
        Ok(())
    }
}

/// Per-pixel coverage flags, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coverage {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
}

impl Coverage {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            mask: vec![true; height * width],
        }
    }

    pub fn is_covered(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.mask.len() as f64
    }

    pub fn and(&self, other: &Coverage) -> Coverage {
        Coverage {
            height: self.height,
            width: self.width,
            mask: self.mask.iter().zip(&other.mask).map(|(a, b)| *a && *b).collect(),
        }
    }
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

fn bilinear(data: &[f64], h: usize, w: usize, c: usize, x: f64, y: f64, out: &mut [f64]) -> bool {
    let (x, y) = (snap(x), snap(y));
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        out.iter_mut().for_each(|o| *o = 0.0);
        return false;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let at = |xx: usize, yy: usize, ch: usize| data[(yy * w + xx) * c + ch];
    for (ch, o) in out.iter_mut().enumerate() {
        *o = if fx == 0.0 && fy == 0.0 {
            at(x0, y0, ch)
        } else if fy == 0.0 {
            (1.0 - fx) * at(x0, y0, ch) + fx * at(x1, y0, ch)
        } else if fx == 0.0 {
            (1.0 - fy) * at(x0, y0, ch) + fy * at(x0, y1, ch)
        } else {
            (1.0 - fx) * (1.0 - fy) * at(x0, y0, ch)
                + fx * (1.0 - fy) * at(x1, y0, ch)
                + (1.0 - fx) * fy * at(x0, y1, ch)
                + fx * fy * at(x1, y1, ch)
        };
    }
    true
}

/// Samples `src` at every coordinate of `field`.
///
/// `src_frame` converts the field's normalized coordinates into pixel
/// positions of `src`; it must describe `src`'s dimensions.
pub fn remap(src: &Image, field: &WarpField, src_frame: &Frame) -> Result<(Image, Coverage)> {
    if (src_frame.height(), src_frame.width()) != (src.height, src.width) {
        return Err(Error::ShapeMismatch(format!(
            "source frame {}x{} does not describe a {}x{} image",
            src_frame.height(),
            src_frame.width(),
            src.height,
            src.width
        )));
    }
    let (h, w, c) = (field.height(), field.width(), src.channels);
    let mut data = vec![0.0; h * w * c];
    let mut mask = vec![false; h * w];
    data.par_chunks_mut(w * c)
        .zip(mask.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (row, mrow))| {
            for x in 0..w {
                if !field.is_valid(x, y) {
                    continue;
                }
                let (sx, sy) = src_frame.to_pixel(field.at(x, y));
                mrow[x] = src.sample_into(sx, sy, &mut row[x * c..(x + 1) * c]);
            }
        });
    Ok((Image::from_vec(h, w, c, data)?, Coverage { height: h, width: w, mask }))
}

/// Remap into the source's own frame.
pub fn remap_self(src: &Image, field: &WarpField) -> Result<(Image, Coverage)> {
    remap(src, field, &Frame::new(src.height, src.width)?)
}

/// Settings for numerically inverting a warp field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvertOptions {
    pub max_iters: usize,
    /// Residual tolerance in normalized units.
    pub tol: f64,
}

impl Default for InvertOptions {
    fn default() -> Self {
        Self {
            max_iters: 30,
            tol: 1e-4,
        }
    }
}

/// For each pixel of an `out_h x out_w` undistorted frame, the continuous
/// pixel position in the field's grid that maps onto it, if one was found.
///
/// Solves `field(p) = target` with damped Newton steps on the bilinearly
/// interpolated field, starting from the identity guess and falling back to
/// the nearest coarse grid sample.
pub fn invert_field(
    field: &WarpField,
    out_h: usize,
    out_w: usize,
    opts: InvertOptions,
) -> Result<Vec<Option<(f64, f64)>>> {
    let targets = normalized_grid(out_h, out_w)?;
    let own = Frame::new(field.height(), field.width())?;
    let coarse = CoarseIndex::new(field);
    let mut out = vec![None; out_h * out_w];
    out.par_chunks_mut(out_w).enumerate().for_each(|(y, row)| {
        for (x, slot) in row.iter_mut().enumerate() {
            let t = targets.at(x, y);
            let guess = own.to_pixel(t);
            *slot = newton_invert(field, t, guess, opts)
                .or_else(|| coarse.nearest(field, t).and_then(|g| newton_invert(field, t, g, opts)));
        }
    });
    Ok(out)
}

/// Maps a warped image back to the undistorted frame by inverting `field`.
///
/// `img` must have the field's dimensions. Pixels without a preimage, or
/// where the iteration does not converge, are uncovered.
pub fn unwarp(img: &Image, field: &WarpField, out_h: usize, out_w: usize) -> Result<(Image, Coverage)> {
    unwarp_with(img, field, out_h, out_w, InvertOptions::default())
}

pub fn unwarp_with(
    img: &Image,
    field: &WarpField,
    out_h: usize,
    out_w: usize,
    opts: InvertOptions,
) -> Result<(Image, Coverage)> {
    if (img.height, img.width) != (field.height(), field.width()) {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs field {}x{}",
            img.height,
            img.width,
            field.height(),
            field.width()
        )));
    }
    let pre = invert_field(field, out_h, out_w, opts)?;
    // Warped pixels whose own sample fell outside the output frame carry no
    // content; interpolating across them would bleed fill values in.
    let out_frame = Frame::new(out_h, out_w)?;
    let (xmax, ymax) = ((out_w - 1) as f64 + SNAP, (out_h - 1) as f64 + SNAP);
    let content: Vec<bool> = field
        .coords()
        .iter()
        .zip(field.valid())
        .map(|(&q, &ok)| {
            let (x, y) = out_frame.to_pixel(q);
            ok && (-SNAP..=xmax).contains(&x) && (-SNAP..=ymax).contains(&y)
        })
        .collect();
    let c = img.channels;
    let mut data = vec![0.0; out_h * out_w * c];
    let mut mask = vec![false; out_h * out_w];
    for (i, p) in pre.iter().enumerate() {
        if let Some((px, py)) = *p {
            mask[i] = corners_have_content(&content, field.width(), field.height(), px, py)
                && img.sample_into(px, py, &mut data[i * c..(i + 1) * c]);
        }
    }
    Ok((
        Image::from_vec(out_h, out_w, c, data)?,
        Coverage {
            height: out_h,
            width: out_w,
            mask,
        },
    ))
}

fn corners_have_content(content: &[bool], w: usize, h: usize, x: f64, y: f64) -> bool {
    let (x0, y0) = (x.floor().max(0.0) as usize, y.floor().max(0.0) as usize);
    let (x1, y1) = (x.ceil().min((w - 1) as f64) as usize, y.ceil().min((h - 1) as f64) as usize);
    content[y0 * w + x0] && content[y0 * w + x1] && content[y1 * w + x0] && content[y1 * w + x1]
}

fn clamp_to(field: &WarpField, p: (f64, f64)) -> (f64, f64) {
    (
        p.0.clamp(0.0, (field.width() - 1) as f64),
        p.1.clamp(0.0, (field.height() - 1) as f64),
    )
}

fn residual(field: &WarpField, p: (f64, f64), t: NormalizedPoint) -> Option<(f64, crate::grid::FieldSample)> {
    let s = field.sample(p.0, p.1)?;
    let r = (s.point.u - t.u).hypot(s.point.v - t.v);
    Some((r, s))
}

fn newton_invert(
    field: &WarpField,
    t: NormalizedPoint,
    guess: (f64, f64),
    opts: InvertOptions,
) -> Option<(f64, f64)> {
    if !(guess.0.is_finite() && guess.1.is_finite()) {
        return None;
    }
    let mut p = clamp_to(field, guess);
    let (mut r, mut s) = residual(field, p, t)?;
    for _ in 0..opts.max_iters {
        if r < opts.tol {
            return Some(p);
        }
        let det = s.du_dx * s.dv_dy - s.du_dy * s.dv_dx;
        if det.abs() < 1e-14 {
            return None;
        }
        let (eu, ev) = (t.u - s.point.u, t.v - s.point.v);
        let dx = (s.dv_dy * eu - s.du_dy * ev) / det;
        let dy = (-s.dv_dx * eu + s.du_dx * ev) / det;
        let mut step = 1.0;
        loop {
            let q = clamp_to(field, (p.0 + step * dx, p.1 + step * dy));
            if let Some((rq, sq)) = residual(field, q, t) {
                if rq < r {
                    p = q;
                    r = rq;
                    s = sq;
                    break;
                }
            }
            step *= 0.5;
            if step < 1.0 / 64.0 {
                return None;
            }
        }
    }
    (r < opts.tol).then_some(p)
}

/// Subsampled field positions used to seed the inversion when the identity
/// guess fails (fields whose coordinates live in a different frame).
struct CoarseIndex {
    points: Vec<(usize, usize)>,
}

impl CoarseIndex {
    fn new(field: &WarpField) -> Self {
        let step = (field.height().max(field.width()) / 32).max(1);
        let points = (0..field.height())
            .step_by(step)
            .flat_map(|y| (0..field.width()).step_by(step).map(move |x| (x, y)))
            .filter(|&(x, y)| field.is_valid(x, y))
            .collect();
        Self { points }
    }

    fn nearest(&self, field: &WarpField, t: NormalizedPoint) -> Option<(f64, f64)> {
        self.points
            .iter()
            .map(|&(x, y)| {
                let p = field.at(x, y);
                ((p.u - t.u).hypot(p.v - t.v), x, y)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, x, y)| (x as f64, y as f64))
    }
}

/// Square crop window in source pixel units: the output pixel `(i, j)` of an
/// `R x R` resize samples source position `(x0 + i * side / R, y0 + j * side / R)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropWindow {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
}

impl CropWindow {
    /// Largest centered square.
    pub fn full(height: usize, width: usize) -> Self {
        let side = height.min(width) as f64;
        Self {
            x0: ((width as f64 - side) / 2.0).floor(),
            y0: ((height as f64 - side) / 2.0).floor(),
            side,
        }
    }

    /// Side `~ U(min_frac, 1) * short side`, position uniform such that
    /// every output sample stays inside the source.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        height: usize,
        width: usize,
        out_res: usize,
        min_frac: f64,
    ) -> Self {
        let short = height.min(width) as f64;
        let side = short * (min_frac + (1.0 - min_frac) * rng.random::<f64>());
        let reach = side * (out_res - 1) as f64 / out_res as f64;
        let x_room = ((width - 1) as f64 - reach).max(0.0);
        let y_room = ((height - 1) as f64 - reach).max(0.0);
        Self {
            x0: x_room * rng.random::<f64>(),
            y0: y_room * rng.random::<f64>(),
            side,
        }
    }

    fn source_position(&self, i: usize, j: usize, out_res: usize) -> (f64, f64) {
        let step = self.side / out_res as f64;
        (self.x0 + i as f64 * step, self.y0 + j as f64 * step)
    }
}

/// Lower bound on the crop side as a fraction of the short side.
pub const MIN_CROP_FRACTION: f64 = 0.5;

/// Distorts `src` at native resolution, takes a random square crop, and
/// resizes image and field jointly to `model_res x model_res`.
pub fn warp_then_crop<R: Rng + ?Sized>(
    src: &Image,
    lens: &LensParams,
    crop_rng: &mut R,
    model_res: usize,
) -> Result<WarpedCrop> {
    check_source(src, model_res)?;
    let frame = Frame::new(src.height, src.width)?;
    let native = warp_field_from_lens(lens, src.height, src.width)?;
    let mags = content_magnification(&native, &frame);
    // Rejection-sample windows until the crop, after resizing to the model
    // resolution, magnifies no source pixel; keep the mildest otherwise.
    let mut best: Option<(f64, CropWindow)> = None;
    for _ in 0..CROP_ATTEMPTS {
        let w = CropWindow::random(crop_rng, src.height, src.width, model_res, MIN_CROP_FRACTION);
        let m = window_max(&mags, src.width, src.height, &w, model_res) * model_res as f64 / w.side;
        if best.is_none_or(|(b, _)| m < b) {
            best = Some((m, w));
        }
        // Margin for the native-resolution differences used here.
        if m <= 0.95 {
            break;
        }
    }
    let window = best.map(|(_, w)| w).unwrap_or_else(|| CropWindow::full(src.height, src.width));
    warp_then_crop_at(src, lens, window, model_res)
}

/// Crop windows tried by [`warp_then_crop`] before settling.
pub const CROP_ATTEMPTS: usize = 256;

fn content_magnification(field: &WarpField, src_frame: &Frame) -> Vec<f64> {
    let (xmax, ymax) = ((src_frame.width() - 1) as f64, (src_frame.height() - 1) as f64);
    sampling_magnification(field, src_frame)
        .into_iter()
        .zip(field.coords())
        .map(|(m, &p)| {
            let (x, y) = src_frame.to_pixel(p);
            if (0.0..=xmax).contains(&x) && (0.0..=ymax).contains(&y) {
                m
            } else {
                0.0
            }
        })
        .collect()
}

fn window_max(mags: &[f64], w: usize, h: usize, win: &CropWindow, out_res: usize) -> f64 {
    let (a, b) = win.source_position(0, 0, out_res);
    let (c, d) = win.source_position(out_res - 1, out_res - 1, out_res);
    let (x0, y0) = (a.floor() as usize, b.floor() as usize);
    let (x1, y1) = ((c.ceil() as usize).min(w - 1), (d.ceil() as usize).min(h - 1));
    let mut m: f64 = 0.0;
    for y in y0..=y1 {
        for x in x0..=x1 {
            m = m.max(mags[y * w + x]);
        }
    }
    m
}

/// Largest [`sampling_magnification`] over pixels whose sample lands inside
/// the source frame.
pub fn max_content_magnification(field: &WarpField, src_frame: &Frame) -> f64 {
    content_magnification(field, src_frame).into_iter().fold(0.0, f64::max)
}

/// Output of [`warp_then_crop`]: the training image, its conditioning field
/// (coordinates in the source's normalized frame) and coverage.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpedCrop {
    pub image: Image,
    pub field: WarpField,
    pub coverage: Coverage,
    pub window: CropWindow,
}

fn check_source(src: &Image, model_res: usize) -> Result<()> {
    check_dims(model_res, model_res, 2)?;
    if src.height < model_res || src.width < model_res {
        return Err(Error::InvalidDimensions {
            height: src.height,
            width: src.width,
            reason: "source must be at least the model resolution",
        });
    }
    Ok(())
}

pub fn warp_then_crop_at(
    src: &Image,
    lens: &LensParams,
    window: CropWindow,
    model_res: usize,
) -> Result<WarpedCrop> {
    check_source(src, model_res)?;
    let frame = Frame::new(src.height, src.width)?;
    let native_field = warp_field_from_lens(lens, src.height, src.width)?;
    let (warped, native_cov) = remap(src, &native_field, &frame)?;

    let r = model_res;
    let c = src.channels;
    let mut data = vec![0.0; r * r * c];
    let mut mask = vec![false; r * r];
    let mut coords = vec![NormalizedPoint::default(); r * r];
    let cov_values: Vec<f64> = native_cov.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let field_values: Vec<f64> = native_field.coords().iter().flat_map(|p| [p.u, p.v]).collect();
    let mut tmp = [0.0; 2];
    let mut cov = [0.0];
    for j in 0..r {
        for i in 0..r {
            let k = j * r + i;
            let (sx, sy) = window.source_position(i, j, r);
            let inside = warped.sample_into(sx, sy, &mut data[k * c..(k + 1) * c]);
            bilinear(&field_values, src.height, src.width, 2, sx, sy, &mut tmp);
            bilinear(&cov_values, src.height, src.width, 1, sx, sy, &mut cov);
            coords[k] = if inside {
                NormalizedPoint::new(tmp[0], tmp[1])
            } else {
                distort_outside(&frame, lens, sx, sy)
            };
            // Covered only when every contributing source pixel was covered.
            mask[k] = inside && cov[0] > 1.0 - 1e-12;
            if !mask[k] {
                data[k * c..(k + 1) * c].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    Ok(WarpedCrop {
        image: Image::from_vec(r, r, c, data)?,
        field: WarpField::from_parts(r, r, coords, vec![true; r * r])?,
        coverage: Coverage {
            height: r,
            width: r,
            mask,
        },
        window,
    })
}

fn distort_outside(frame: &Frame, lens: &LensParams, sx: f64, sy: f64) -> NormalizedPoint {
    crate::lens::distort_point(frame.to_normalized(sx, sy), lens)
}

/// Post-hoc baseline: warp an already-rendered image at its own resolution.
pub fn naive_warp(src: &Image, lens: &LensParams) -> Result<(Image, Coverage)> {
    let field = warp_field_from_lens(lens, src.height, src.width)?;
    remap_self(src, &field)
}

/// Per-pixel local magnification of the sampling: output pixels per source
/// pixel along the most-stretched direction (`1 / sigma_min` of the
/// Jacobian of source pixel position with respect to output pixel
/// position). Values above 1 mean the source is being up-scaled.
pub fn sampling_magnification(field: &WarpField, src_frame: &Frame) -> Vec<f64> {
    let (h, w) = (field.height(), field.width());
    let px = |x: usize, y: usize| src_frame.to_pixel(field.at(x, y));
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (xa, xb, dxn) = span(x, w);
            let (ya, yb, dyn_) = span(y, h);
            let (ax, ay) = px(xa, y);
            let (bx, by) = px(xb, y);
            let (cx, cy) = px(x, ya);
            let (dx, dy) = px(x, yb);
            let j = [
                (bx - ax) / dxn,
                (dx - cx) / dyn_,
                (by - ay) / dxn,
                (dy - cy) / dyn_,
            ];
            let sigma_min = singular_values_2x2(j).1;
            out[y * w + x] = if sigma_min > 0.0 { 1.0 / sigma_min } else { f64::INFINITY };
        }
    }
    out
}

fn span(i: usize, n: usize) -> (usize, usize, f64) {
    if i == 0 {
        (0, 1, 1.0)
    } else if i == n - 1 {
        (n - 2, n - 1, 1.0)
    } else {
        (i - 1, i + 1, 2.0)
    }
}

/// Singular values `(max, min)` of `[[a, b], [c, d]]`.
pub(crate) fn singular_values_2x2([a, b, c, d]: [f64; 4]) -> (f64, f64) {
    let s1 = a * a + b * b + c * c + d * d;
    let det = a * d - b * c;
    let disc = (s1 * s1 - 4.0 * det * det).max(0.0).sqrt();
    let hi = ((s1 + disc) / 2.0).sqrt();
    let lo = ((s1 - disc) / 2.0).max(0.0).sqrt();
    (hi, lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lens::LensParams;
    use rand::SeedableRng;

    fn gradient(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |x, y| 0.2 + 0.5 * x as f64 / w as f64 + 0.25 * y as f64 / h as f64).unwrap()
    }

    fn rgb(h: usize, w: usize) -> Image {
        let data = (0..h * w * 3).map(|i| ((i * 7919) % 101) as f64 / 100.0).collect();
        Image::from_vec(h, w, 3, data).unwrap()
    }

    #[test]
    fn identity_remap_is_bit_identical() {
        for (h, w) in [(17, 17), (30, 50), (64, 33)] {
            let src = rgb(h, w);
            let (out, cov) = remap_self(&src, &normalized_grid(h, w).unwrap()).unwrap();
            assert_eq!(out, src);
            assert_eq!(cov.count(), h * w);
        }
    }

    #[test]
    fn shifted_field_uncovers_the_right_half() {
        let src = gradient(32, 32);
        let field = normalized_grid(32, 32)
            .unwrap()
            .map_coords(|p| NormalizedPoint::new(p.u + 0.5, p.v))
            .unwrap();
        let (out, cov) = remap_self(&src, &field).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                // x + 16 must be a valid column.
                assert_eq!(cov.is_covered(x, y), x + 16 <= 31, "pixel ({x},{y})");
                if !cov.is_covered(x, y) {
                    assert_eq!(out.get(x, y, 0), 0.0);
                }
            }
        }
    }

    #[test]
    fn coverage_matches_sample_positions() {
        let src = gradient(40, 40);
        let field = warp_field_from_lens(&LensParams::radial(1.5), 40, 40).unwrap();
        let (_, cov) = remap_self(&src, &field).unwrap();
        let frame = Frame::new(40, 40).unwrap();
        for y in 0..40 {
            for x in 0..40 {
                let (sx, sy) = frame.to_pixel(field.at(x, y));
                let inside = (-SNAP..=39.0 + SNAP).contains(&sx) && (-SNAP..=39.0 + SNAP).contains(&sy);
                assert_eq!(cov.is_covered(x, y), inside);
            }
        }
    }

    #[test]
    fn strong_fisheye_leaves_corners_uncovered() {
        let src = gradient(64, 64);
        let (_, cov) = naive_warp(&src, &LensParams::radial(5.0)).unwrap();
        for (x, y) in [(0, 0), (63, 0), (0, 63), (63, 63)] {
            assert!(!cov.is_covered(x, y));
        }
        assert!(cov.is_covered(32, 32));
    }

    #[test]
    fn identity_unwarp_is_identity() {
        let src = gradient(24, 24);
        let (out, cov) = unwarp(&src, &normalized_grid(24, 24).unwrap(), 24, 24).unwrap();
        assert_eq!(cov.count(), 24 * 24);
        for (a, b) in out.data().iter().zip(src.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn unwarp_inverts_remap_on_a_smooth_image() {
        let n = 96;
        let src = Image::from_fn(n, n, |x, y| {
            let (u, v) = (x as f64 / n as f64, y as f64 / n as f64);
            0.5 + 0.3 * (3.0 * u).sin() * (2.0 * v).cos()
        })
        .unwrap();
        let field = warp_field_from_lens(&LensParams::radial(0.2), n, n).unwrap();
        let (warped, _) = remap_self(&src, &field).unwrap();
        let (back, cov) = unwarp(&warped, &field, n, n).unwrap();
        let psnr = back.psnr(&src, &cov).unwrap();
        assert!(psnr >= 30.0, "psnr {psnr}");
        assert!(cov.fraction() > 0.5);
    }

    #[test]
    fn newton_handles_strong_distortion() {
        let field = warp_field_from_lens(&LensParams::radial(25.0), 128, 128).unwrap();
        let pre = invert_field(&field, 32, 32, InvertOptions::default()).unwrap();
        let targets = normalized_grid(32, 32).unwrap();
        let mut found = 0;
        for (i, p) in pre.iter().enumerate() {
            if let Some((x, y)) = p {
                let s = field.sample(*x, *y).unwrap().point;
                let t = targets.coords()[i];
                assert!((s.u - t.u).hypot(s.v - t.v) < 1e-4);
                found += 1;
            }
        }
        assert_eq!(found, 32 * 32, "every unit-square point has a preimage");
    }

    #[test]
    fn warp_then_crop_zero_lens_full_frame_gives_identity_field() {
        let src = gradient(128, 128);
        let out = warp_then_crop_at(&src, &LensParams::identity(), CropWindow::full(128, 128), 64).unwrap();
        assert_eq!(out.field, normalized_grid(64, 64).unwrap());
        assert_eq!(out.coverage.count(), 64 * 64);
        for j in 0..64 {
            for i in 0..64 {
                assert_eq!(out.image.get(i, j, 0), src.get(2 * i, 2 * j, 0));
            }
        }
    }

    #[test]
    fn interior_crops_are_fully_covered() {
        let src = rgb(100, 140);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let out = warp_then_crop(&src, &LensParams::identity(), &mut rng, 48).unwrap();
            assert_eq!(out.coverage.count(), 48 * 48);
            assert_eq!(out.image.channels(), 3);
        }
    }

    #[test]
    fn small_sources_are_rejected() {
        let src = gradient(32, 32);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert!(warp_then_crop(&src, &LensParams::identity(), &mut rng, 64).is_err());
    }

    #[test]
    fn warp_then_crop_avoids_upscaling_unlike_post_hoc_warping() {
        let src = gradient(1024, 1024);
        let lens = LensParams::radial(2.0);
        let out = warp_then_crop_at(&src, &lens, CropWindow::full(1024, 1024), 512).unwrap();
        let mag = sampling_magnification(&out.field, &Frame::new(1024, 1024).unwrap());
        let worst = mag.iter().copied().fold(0.0, f64::max);
        assert!(worst <= 1.0 + 1e-9, "max magnification {worst}");

        // Same geometry rendered at model resolution and warped afterwards:
        // a pincushion-type sampling lens up-scales the periphery.
        let naive = warp_field_from_lens(&LensParams::radial(-0.8), 512, 512).unwrap();
        let mag = sampling_magnification(&naive, &Frame::new(512, 512).unwrap());
        assert!(mag.iter().copied().fold(0.0, f64::max) > 1.5);
    }

    #[test]
    fn singular_values_of_known_matrices() {
        let (a, b) = singular_values_2x2([3.0, 0.0, 0.0, -2.0]);
        assert!((a - 3.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12);
        let (a, b) = singular_values_2x2([1.0, 1.0, 0.0, 1.0]);
        let golden = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((a - golden).abs() < 1e-12 && (b - 1.0 / golden).abs() < 1e-12);
    }
}
