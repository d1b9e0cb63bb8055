//! Adaptive reconstruction.
//!
//! The input is diffused to `t_start` and denoised with DDIM. At each visited
//! step the clean estimate of this *generated* branch is compared with the
//! clean estimate obtained by diffusing the input directly to that step. The
//! first step whose difference reaches `delta` fixes the starting point of
//! the final pass: the two clean estimates are blended under a soft anomaly
//! mask, re-noised with the original noise and denoised to step 0. If no
//! step reaches `delta` the final pass starts from `t_min` without blending.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::NoisePredictor;
use crate::diffusion::{ddim_step, descending_steps, diffuse, predict_x0, NoiseSchedule};
use crate::error::{Error, Result};
use crate::scoring::{layer_anomaly_map, resize_bilinear, top_k_mean, Scorer};
use crate::tensor::{ImageTensor, Map2d};
use crate::training::standard_normal_image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSearchConfig {
    pub t_start: usize,
    pub t_min: usize,
    /// Detection threshold on the step difference; `inf` disables detection.
    pub delta: f64,
    /// Redundancy added above the detection step (rounded up to the stride).
    pub n_extra: usize,
    pub stride: usize,
    /// Extractor layer for the step difference; `None` is the deepest layer.
    pub diff_layer: Option<usize>,
    pub diff_top_k: usize,
}

impl Default for StepSearchConfig {
    fn default() -> Self {
        Self {
            t_start: 750,
            t_min: 350,
            delta: 0.35,
            n_extra: 0,
            stride: 10,
            diff_layer: None,
            diff_top_k: 10,
        }
    }
}

impl StepSearchConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if !(self.t_min < self.t_start && self.t_start <= schedule.t_max()) {
            return Err(Error::param(format!(
                "need 0 <= t_min < t_start <= {}, got t_min={} t_start={}",
                schedule.t_max(),
                self.t_min,
                self.t_start
            )));
        }
        if self.stride == 0 || self.diff_top_k == 0 {
            return Err(Error::param("stride and diff_top_k must be positive"));
        }
        if self.delta.is_nan() || self.delta < 0.0 {
            return Err(Error::param("delta must be non-negative"));
        }
        Ok(())
    }

    /// Steps compared by the search, from `t_start` down to `>= t_min`.
    pub fn visited_steps(&self) -> Vec<usize> {
        (0..)
            .map(|k| self.t_start as i64 - k * self.stride as i64)
            .take_while(|&t| t >= self.t_min as i64 && t >= 1)
            .map(|t| t as usize)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    /// Clean estimate of the generated branch.
    pub generated: ImageTensor,
    /// Clean estimate from diffusing the input directly to `t`.
    pub direct: ImageTensor,
    pub difference: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionTrace {
    pub records: Vec<StepRecord>,
    /// First step whose difference reached `delta`.
    pub detected_step: Option<usize>,
    pub proper_step: usize,
    /// Blend mask; absent when no blending happened.
    pub mask: Option<Map2d>,
    pub final_image: ImageTensor,
}

impl ReconstructionTrace {
    /// `t,difference` rows.
    pub fn steps_csv(&self) -> String {
        let mut s = String::from("t,difference\n");
        for r in &self.records {
            s.push_str(&format!("{},{:.17e}\n", r.t, r.difference));
        }
        s
    }

    pub fn write_steps_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.steps_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Symmetrized deepest-layer difference: the pointwise max of both matching
/// directions, then the mean of the `diff_top_k` largest values.
pub fn step_difference(
    a: &ImageTensor,
    b: &ImageTensor,
    scorer: &Scorer,
    cfg: &StepSearchConfig,
) -> Result<f64> {
    a.check_same_shape(b, "clean estimate")?;
    let feats = scorer.extractor.extract_batch(&[a, b])?;
    let layer = cfg.diff_layer.unwrap_or(feats[0].len() - 1);
    let (fa, fb) = feats[0]
        .get(layer)
        .zip(feats[1].get(layer))
        .ok_or_else(|| Error::param(format!("diff_layer {layer} not produced by the extractor")))?;
    let ab = layer_anomaly_map(fa, fb)?;
    let ba = layer_anomaly_map(fb, fa)?;
    let sym: Vec<f64> = ab
        .data()
        .iter()
        .zip(ba.data())
        .map(|(x, y)| x.max(*y))
        .collect();
    top_k_mean(&sym, cfg.diff_top_k)
}

/// Soft mask `logistic(4·(M − median)/IQR)`; a zero IQR falls back to the
/// full range, a constant map gives 0.5 everywhere.
pub fn build_mask(step_map: &Map2d, (h, w): (usize, usize)) -> Result<Map2d> {
    if step_map.is_empty() {
        return Err(Error::param("empty anomaly map"));
    }
    let mut sorted = step_map.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    };
    let center = q(0.5);
    let mut spread = q(0.75) - q(0.25);
    if !(spread > 0.0) {
        spread = sorted[sorted.len() - 1] - sorted[0];
    }
    let scale = if spread > 0.0 { spread / 4.0 } else { 1.0 };
    let m = step_map.map(|v| 1.0 / (1.0 + (-(v - center) / scale).exp()));
    Ok(resize_bilinear(&m, h, w))
}

/// `√ᾱ_t·(m·generated + (1−m)·direct) + √(1−ᾱ_t)·ε`.
pub fn saff_fuse(
    generated: &ImageTensor,
    direct: &ImageTensor,
    mask: &Map2d,
    t: usize,
    eps: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    generated.check_same_shape(direct, "direct clean estimate")?;
    generated.check_same_shape(eps, "noise")?;
    schedule.check_step(t, 1)?;
    let (c, h, w) = generated.shape();
    if mask.height() != h || mask.width() != w {
        return Err(Error::shape("mask resolution differs from image"));
    }
    if mask.data().iter().any(|m| !(0.0..=1.0).contains(m)) {
        return Err(Error::param("mask values must lie in [0, 1]"));
    }
    let (a, b) = schedule.coefficients(t);
    let mut out = Vec::with_capacity(generated.len());
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let m = mask.get(y, x);
                let blended = m * generated.get(ci, y, x) + (1.0 - m) * direct.get(ci, y, x);
                out.push(a * blended + b * eps.get(ci, y, x));
            }
        }
    }
    ImageTensor::new(c, h, w, out)
}

/// Deterministic DDIM from `x_t` at step `t` down to 0; the result is clamped
/// to model range.
pub fn denoise_from<P: NoisePredictor>(
    model: &P,
    x_t: &ImageTensor,
    t: usize,
    stride: usize,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    let steps = descending_steps(t, stride);
    let mut x = x_t.clone();
    for pair in steps.windows(2) {
        let eps = model.predict(&x, pair[0])?;
        x = ddim_step(&x, pair[0], pair[1], &eps, schedule)?;
    }
    Ok(x.clamp_model_range())
}

/// Diffuse to `t` with `eps` and denoise back: the fixed-step baseline.
pub fn fixed_step_reconstruct<P: NoisePredictor>(
    model: &P,
    x_a: &ImageTensor,
    t: usize,
    stride: usize,
    eps: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    let x_t = diffuse(x_a, t, eps, schedule)?;
    denoise_from(model, &x_t, t, stride, schedule)
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub records: Vec<StepRecord>,
    pub detected_step: Option<usize>,
    pub proper_step: usize,
}

/// Run the step search with the given noise.
pub fn adaptive_step_search<P: NoisePredictor>(
    model: &P,
    scorer: &Scorer,
    x_a: &ImageTensor,
    eps: &ImageTensor,
    schedule: &NoiseSchedule,
    cfg: &StepSearchConfig,
) -> Result<SearchOutcome> {
    cfg.validate(schedule)?;
    x_a.check_same_shape(eps, "noise")?;
    let visited = cfg.visited_steps();
    let mut records = Vec::with_capacity(visited.len());
    let mut x_t = diffuse(x_a, cfg.t_start, eps, schedule)?;
    let mut detected = None;
    for (k, &t) in visited.iter().enumerate() {
        let eps_gen = model.predict(&x_t, t)?;
        let generated = predict_x0(&x_t, t, &eps_gen, schedule)?;
        let direct = if k == 0 {
            generated.clone()
        } else {
            let xd = diffuse(x_a, t, eps, schedule)?;
            predict_x0(&xd, t, &model.predict(&xd, t)?, schedule)?
        };
        let difference = step_difference(&generated, &direct, scorer, cfg)?;
        records.push(StepRecord {
            t,
            generated,
            direct,
            difference,
        });
        if difference >= cfg.delta {
            detected = Some(t);
            break;
        }
        if let Some(&next) = visited.get(k + 1) {
            x_t = ddim_step(&x_t, t, next, &eps_gen, schedule)?;
        }
    }
    let proper_step = match detected {
        Some(t) => {
            let extra = cfg.n_extra.div_ceil(cfg.stride) * cfg.stride;
            (t + extra).min(cfg.t_start)
        }
        None => cfg.t_min,
    };
    Ok(SearchOutcome {
        records,
        detected_step: detected,
        proper_step,
    })
}

/// Full adaptive reconstruction. The noise is drawn from `rng` first, so a
/// fixed-step run fed the same stream uses the same noise.
pub fn reconstruct<P: NoisePredictor>(
    model: &P,
    scorer: &Scorer,
    x_a: &ImageTensor,
    schedule: &NoiseSchedule,
    cfg: &StepSearchConfig,
    rng: &mut impl Rng,
) -> Result<ReconstructionTrace> {
    let eps = standard_normal_image(rng, x_a.channels(), x_a.height(), x_a.width());
    reconstruct_with_noise(model, scorer, x_a, &eps, schedule, cfg)
}

pub fn reconstruct_with_noise<P: NoisePredictor>(
    model: &P,
    scorer: &Scorer,
    x_a: &ImageTensor,
    eps: &ImageTensor,
    schedule: &NoiseSchedule,
    cfg: &StepSearchConfig,
) -> Result<ReconstructionTrace> {
    let search = adaptive_step_search(model, scorer, x_a, eps, schedule, cfg)?;
    let p = search.proper_step;
    let (start, mask) = match search.detected_step {
        Some(_) if p < cfg.t_start => {
            let detect = search.records.last().expect("detection implies a record");
            let map = scorer.score(&detect.direct, &detect.generated)?.map;
            let mask = build_mask(&map, (x_a.height(), x_a.width()))?;
            let at_p = search
                .records
                .iter()
                .find(|r| r.t == p)
                .expect("proper step is a visited step");
            (
                saff_fuse(&at_p.generated, &at_p.direct, &mask, p, eps, schedule)?,
                Some(mask),
            )
        }
        // detected at t_start (both branches coincide) or not at all
        _ => (diffuse(x_a, p, eps, schedule)?, None),
    };
    let final_image = denoise_from(model, &start, p, cfg.stride, schedule)?;
    Ok(ReconstructionTrace {
        records: search.records,
        detected_step: search.detected_step,
        proper_step: p,
        mask,
        final_image,
    })
}

/// Smallest `delta` that none of `normals` reaches: just above the largest
/// step difference seen with detection disabled. Image `i` is diffused with
/// noise from a stream seeded `seed + i`.
pub fn calibrate_delta<P: NoisePredictor>(
    model: &P,
    scorer: &Scorer,
    normals: &[ImageTensor],
    schedule: &NoiseSchedule,
    cfg: &StepSearchConfig,
    seed: u64,
) -> Result<f64> {
    if normals.is_empty() {
        return Err(Error::param(
            "delta calibration needs at least one normal image",
        ));
    }
    let probe = StepSearchConfig {
        delta: f64::INFINITY,
        ..cfg.clone()
    };
    let mut worst = 0.0f64;
    for (i, x) in normals.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let eps = standard_normal_image(&mut rng, x.channels(), x.height(), x.width());
        let search = adaptive_step_search(model, scorer, x, &eps, schedule, &probe)?;
        for r in &search.records {
            worst = worst.max(r.difference);
        }
    }
    Ok(worst.next_up())
}
