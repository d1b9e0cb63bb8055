//! Synthetic anomalies for training: a random mask blends an out-of-distribution
//! texture into a normal image, yielding `(x, x_a, mask, n = x_a - x)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::fractal_noise;
use crate::tensor::{ImageTensor, Map2d};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// Thresholded multi-octave noise (irregular blobs).
    FractalNoise,
    /// A single axis-aligned rectangle.
    Rectangles,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureSource {
    /// Recolored multi-octave noise, independent of the image.
    Procedural,
    /// The image itself, flipped and cyclically shifted.
    SelfPatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub mask_kind: MaskKind,
    /// Foreground fraction interval `[lo, hi]`.
    pub coverage_range: (f64, f64),
    /// Blend opacity β interval.
    pub opacity_range: (f64, f64),
    pub texture_source: TextureSource,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            mask_kind: MaskKind::FractalNoise,
            coverage_range: (0.02, 0.15),
            opacity_range: (0.5, 1.0),
            texture_source: TextureSource::Procedural,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.coverage_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::param(format!(
                "coverage range must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
            )));
        }
        let (lo, hi) = self.opacity_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::param(format!(
                "opacity range must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

/// Training unit: a normal image, its anomalous version, the binary mask and
/// the exact difference `n = x_a - x`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub x: ImageTensor,
    pub x_a: ImageTensor,
    pub mask: Map2d,
    pub n: ImageTensor,
}

impl SynthPair {
    /// A pair without anomaly (`x_a = x`, `n = 0`).
    pub fn normal(x: ImageTensor) -> Self {
        let (c, h, w) = x.shape();
        Self {
            x_a: x.clone(),
            mask: Map2d::zeros(h, w),
            n: ImageTensor::zeros(c, h, w),
            x,
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

pub fn generate_mask(
    rng: &mut impl Rng,
    (h, w): (usize, usize),
    params: &SynthParams,
) -> Result<Map2d> {
    params.validate()?;
    if h < 8 || w < 8 {
        return Err(Error::param(format!("mask needs h, w >= 8, got {h}x{w}")));
    }
    let area = h * w;
    let (lo, hi) = params.coverage_range;
    let min_px = ((lo * area as f64).ceil() as usize).max(1);
    let max_px = (hi * area as f64).floor() as usize;
    if min_px > max_px {
        return Err(Error::param(format!(
            "coverage range ({lo}, {hi}) holds no whole pixel count on a {h}x{w} grid"
        )));
    }
    let target = ((uniform(rng, (lo, hi)) * area as f64).round() as usize).clamp(min_px, max_px);

    let mut mask = Map2d::zeros(h, w);
    match params.mask_kind {
        MaskKind::FractalNoise => {
            let cell = (h.min(w) as f64 / 2.0).max(4.0);
            let field = fractal_noise(rng, h, w, cell, 3);
            let mut order: Vec<usize> = (0..area).collect();
            order.sort_by(|&a, &b| field.data()[b].total_cmp(&field.data()[a]).then(a.cmp(&b)));
            for &p in &order[..target] {
                mask.data_mut()[p] = 1.0;
            }
        }
        MaskKind::Rectangles => {
            let aspect = uniform(rng, (0.5f64.ln(), 2.0f64.ln())).exp();
            let fit = |rw: usize| -> (usize, usize) {
                let rh = ((target as f64 / rw as f64).round() as usize).clamp(1, h);
                (rw, rh)
            };
            let rw0 = ((target as f64 * aspect).sqrt().round() as usize).clamp(1, w);
            let mut best = fit(rw0);
            let in_range = |(a, b): (usize, usize)| (min_px..=max_px).contains(&(a * b));
            if !in_range(best) {
                best = (1..=w)
                    .map(fit)
                    .filter(|&d| in_range(d))
                    .min_by_key(|&(a, b)| ((a * b) as isize - target as isize).unsigned_abs())
                    .ok_or_else(|| {
                        Error::param(format!(
                            "no rectangle with area in [{min_px}, {max_px}] fits {h}x{w}"
                        ))
                    })?;
            }
            let (rw, rh) = best;
            let x0 = rng.random_range(0..=w - rw);
            let y0 = rng.random_range(0..=h - rh);
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    mask.set(y, x, 1.0);
                }
            }
        }
    }
    Ok(mask)
}

/// Texture to blend into masked pixels, in model range.
pub fn make_texture(rng: &mut impl Rng, x: &ImageTensor, source: TextureSource) -> ImageTensor {
    let (c, h, w) = x.shape();
    match source {
        TextureSource::Procedural => {
            let cell = (h.min(w) as f64 / 4.0).max(2.0);
            let field = fractal_noise(rng, h, w, cell, 4);
            let colors: Vec<(f64, f64)> = (0..c)
                .map(|_| (rng.random_range(-0.9..0.9), rng.random_range(-2.0..2.0)))
                .collect();
            ImageTensor::from_fn(c, h, w, |ci, y, xx| {
                let (center, gain) = colors[ci];
                (center + gain * field.get(y, xx)).clamp(-1.0, 1.0)
            })
        }
        TextureSource::SelfPatch => {
            let flip_y = rng.random_bool(0.5);
            let flip_x = rng.random_bool(0.5);
            let dy = rng.random_range(h / 4..=h - h / 4);
            let dx = rng.random_range(w / 4..=w - w / 4);
            ImageTensor::from_fn(c, h, w, |ci, y, xx| {
                let sy = (y + dy) % h;
                let sx = (xx + dx) % w;
                let sy = if flip_y { h - 1 - sy } else { sy };
                let sx = if flip_x { w - 1 - sx } else { sx };
                x.get(ci, sy, sx)
            })
        }
    }
}

/// Blend `texture` into `x` under `mask` with opacity `beta` and clamp; `n`
/// is computed after clamping so it is exactly zero outside the mask.
pub fn blend(x: &ImageTensor, mask: &Map2d, beta: f64, texture: &ImageTensor) -> Result<SynthPair> {
    x.check_same_shape(texture, "texture")?;
    let (c, h, w) = x.shape();
    if mask.height() != h || mask.width() != w {
        return Err(Error::shape("mask resolution differs from image"));
    }
    let mut x_a = x.clone();
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let m = mask.get(y, xx);
                if m == 0.0 {
                    continue;
                }
                let bm = beta * m;
                let v = (1.0 - bm) * x.get(ci, y, xx) + bm * texture.get(ci, y, xx);
                x_a.set(ci, y, xx, v.clamp(-1.0, 1.0));
            }
        }
    }
    let n = x_a.zip_map(x, |a, b| a - b)?;
    Ok(SynthPair {
        x: x.clone(),
        x_a,
        mask: mask.clone(),
        n,
    })
}

pub fn synthesize_anomaly(
    x: &ImageTensor,
    rng: &mut impl Rng,
    params: &SynthParams,
) -> Result<SynthPair> {
    let mask = generate_mask(rng, (x.height(), x.width()), params)?;
    let beta = uniform(rng, params.opacity_range);
    let texture = make_texture(rng, x, params.texture_source);
    blend(x, &mask, beta, &texture)
}
