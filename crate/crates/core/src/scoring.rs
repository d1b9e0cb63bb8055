//! Cosine feature matching between a test image and its reconstruction.
//!
//! Per layer, every test position is matched against *all* reconstruction
//! positions and scored by the smallest cosine distance. Layer maps are
//! bilinearly resized to image resolution, summed and Gaussian-smoothed; the
//! image score is the mean of the top-K map values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::{FeatureExtractor, FeatureMap};
use crate::tensor::{ImageTensor, Map2d};

/// `dot / sqrt(|a|²·|b|²)`, clamped to `[-1, 1]`; zero vectors give 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

/// `M(i,j) = min over (i',j') of 1 − cos(F_t(i,j), F_r(i',j'))`.
pub fn layer_anomaly_map(ft: &FeatureMap, fr: &FeatureMap) -> Result<Map2d> {
    if ft.channels != fr.channels {
        return Err(Error::shape(format!(
            "feature channels differ: {} vs {}",
            ft.channels, fr.channels
        )));
    }
    let c = ft.channels;
    let (a, b) = (ft.to_hwc(), fr.to_hwc());
    let norms =
        |v: &[f64]| -> Vec<f64> { v.chunks(c).map(|p| p.iter().map(|x| x * x).sum()).collect() };
    let (na, nb) = (norms(&a), norms(&b));
    let mut out = Vec::with_capacity(ft.height * ft.width);
    for (i, pa) in a.chunks(c).enumerate() {
        let mut best = f64::INFINITY;
        for (j, pb) in b.chunks(c).enumerate() {
            let cos = if na[i] == 0.0 || nb[j] == 0.0 {
                0.0
            } else {
                let dot: f64 = pa.iter().zip(pb).map(|(x, y)| x * y).sum();
                (dot / (na[i] * nb[j]).sqrt()).clamp(-1.0, 1.0)
            };
            best = best.min(1.0 - cos);
        }
        out.push(best);
    }
    Map2d::new(ft.height, ft.width, out)
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(m: &Map2d, h: usize, w: usize) -> Map2d {
    let (ih, iw) = (m.height(), m.width());
    if ih == h && iw == w {
        return m.clone();
    }
    let coord = |dst: usize, inn: usize, out: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * inn as f64 / out as f64 - 0.5).clamp(0.0, (inn - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(inn - 1);
        (lo, hi, s - lo as f64)
    };
    Map2d::from_fn(h, w, |y, x| {
        let (y0, y1, fy) = coord(y, ih, h);
        let (x0, x1, fx) = coord(x, iw, w);
        let top = m.get(y0, x0) * (1.0 - fx) + m.get(y0, x1) * fx;
        let bottom = m.get(y1, x0) * (1.0 - fx) + m.get(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Normalized 1-d Gaussian taps, radius `round(4σ)`.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma + 0.5) as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mirror index into `[0, n)` with edge repetition (`d c b a | a b c d`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

/// Separable Gaussian blur with reflect padding; `sigma <= 0` is the identity.
pub fn gaussian_smooth(m: &Map2d, sigma: f64) -> Map2d {
    if !(sigma > 0.0) {
        return m.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (m.height(), m.width());
    let rows = Map2d::from_fn(h, w, |y, x| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * m.get(y, reflect(x as isize + i as isize - r, w)))
            .sum()
    });
    Map2d::from_fn(h, w, |y, x| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * rows.get(reflect(y as isize + i as isize - r, h), x))
            .sum()
    })
}

/// Mean of the `k` largest values; `k` is clamped to `[1, len]`.
pub fn top_k_mean(values: &[f64], k: usize) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::param("top-k mean of an empty map"));
    }
    let k = k.clamp(1, values.len());
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    Ok(v[..k].iter().sum::<f64>() / k as f64)
}

/// `ceil(0.061·H·W)`: 250 at a 64×64 grid.
pub fn default_top_k(h: usize, w: usize) -> usize {
    ((0.061 * (h * w) as f64).ceil() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringParams {
    /// Extractor layers summed into the aggregate map.
    pub layers: Vec<usize>,
    pub sigma: f64,
    /// Top-K count; `None` uses [`default_top_k`] of the map size.
    pub top_k: Option<usize>,
}

impl Default for ScoringParams {
    fn default() -> Self {
        Self {
            layers: vec![0, 1, 2, 3],
            sigma: 6.0,
            top_k: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub map: Map2d,
    pub image_score: f64,
    pub sigma: f64,
    pub top_k: usize,
}

pub fn image_score(map: &Map2d, k: usize) -> Result<f64> {
    top_k_mean(map.data(), k)
}

/// Sum of resized layer maps over `params.layers`, smoothed, at `(h, w)`.
pub fn anomaly_map(
    features_t: &[FeatureMap],
    features_r: &[FeatureMap],
    params: &ScoringParams,
    (h, w): (usize, usize),
) -> Result<AnomalyMap> {
    if features_t.len() != features_r.len() {
        return Err(Error::shape(
            "layer sets differ between test and reconstruction",
        ));
    }
    if params.layers.is_empty() {
        return Err(Error::param("scoring needs at least one layer"));
    }
    let mut acc = Map2d::zeros(h, w);
    for &l in &params.layers {
        let (ft, fr) = features_t
            .get(l)
            .zip(features_r.get(l))
            .ok_or_else(|| Error::param(format!("layer {l} not produced by the extractor")))?;
        let m = resize_bilinear(&layer_anomaly_map(ft, fr)?, h, w);
        for (a, v) in acc.data_mut().iter_mut().zip(m.data()) {
            *a += v;
        }
    }
    let map = gaussian_smooth(&acc, params.sigma);
    let top_k = params.top_k.unwrap_or_else(|| default_top_k(h, w));
    Ok(AnomalyMap {
        image_score: image_score(&map, top_k)?,
        map,
        sigma: params.sigma,
        top_k,
    })
}

/// Extractor plus scoring parameters.
#[derive(Debug, Clone)]
pub struct Scorer {
    pub extractor: FeatureExtractor,
    pub params: ScoringParams,
}

impl Scorer {
    pub fn score(&self, test: &ImageTensor, recon: &ImageTensor) -> Result<AnomalyMap> {
        test.check_same_shape(recon, "reconstruction")?;
        let f = self.extractor.extract_batch(&[test, recon])?;
        anomaly_map(&f[0], &f[1], &self.params, (test.height(), test.width()))
    }
}
