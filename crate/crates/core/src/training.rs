//! Denoiser training. Each sample is diffused from its (possibly synthetic
//! anomalous) input `x_a`, and the network is regressed onto the shifted
//! target `ε + (√ᾱ_t / √(1-ᾱ_t))·n` with `n = x_a - x`, so that the implied
//! clean estimate is the normal image `x` rather than `x_a`. With `n = 0` this is ordinary
//! noise-prediction training.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{NoisePredictor, UNet};
use crate::diffusion::{diffuse, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{Adam, Graph, Tensor};
use crate::synth::{synthesize_anomaly, SynthPair, SynthParams};
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of each batch replaced by synthetic anomalies.
    pub p_anom: f64,
    pub seed: u64,
    pub synth: SynthParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 4000,
            batch_size: 32,
            learning_rate: 5e-6,
            p_anom: 0.5,
            seed: 0,
            synth: SynthParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning_rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_anom) {
            return Err(Error::param("p_anom must lie in [0, 1]"));
        }
        self.synth.validate()
    }

    /// Number of anomalous samples in every batch.
    pub fn anomalous_per_batch(&self) -> usize {
        (self.p_anom * self.batch_size as f64).round() as usize
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut s = String::from("iteration,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{},{l:e}\n", i + 1));
        }
        f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// `ε + (√ᾱ_t / √(1-ᾱ_t))·n`: the noise whose clean estimate from
/// `diffuse(x_a, t, ε)` is exactly `x_a - n`.
pub fn atp_target(
    eps: &ImageTensor,
    n: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    schedule.check_step(t, 1)?;
    let (a, b) = schedule.coefficients(t);
    let k = a / b;
    eps.zip_map(n, |e, d| e + k * d)
}

fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.check_same_shape(b, "prediction")?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.len() as f64)
}

/// Single-sample loss on a synthesized pair with explicit noise.
pub fn atp_loss<P: NoisePredictor>(
    model: &P,
    pair: &SynthPair,
    t: usize,
    eps: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let x_t = diffuse(&pair.x_a, t, eps, schedule)?;
    let target = atp_target(eps, &pair.n, t, schedule)?;
    mse(&target, &model.predict(&x_t, t)?)
}

/// Plain noise-prediction loss `‖ε - ε_θ(x_t, t)‖²` (mean over entries).
pub fn standard_loss<P: NoisePredictor>(
    model: &P,
    x: &ImageTensor,
    t: usize,
    eps: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    schedule.check_step(t, 1)?;
    let x_t = diffuse(x, t, eps, schedule)?;
    mse(eps, &model.predict(&x_t, t)?)
}

pub fn standard_normal_image(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> ImageTensor {
    ImageTensor::from_fn(c, h, w, |_, _, _| StandardNormal.sample(rng))
}

/// A fully specified training sample: the network sees `x_t` at step `t`
/// and regresses onto `target`.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub x_t: ImageTensor,
    pub t: usize,
    pub target: ImageTensor,
}

impl TrainSample {
    pub fn from_pair(
        pair: &SynthPair,
        t: usize,
        eps: &ImageTensor,
        schedule: &NoiseSchedule,
    ) -> Result<Self> {
        Ok(Self {
            x_t: diffuse(&pair.x_a, t, eps, schedule)?,
            t,
            target: atp_target(eps, &pair.n, t, schedule)?,
        })
    }
}

/// Draw one batch. Per sample: image index, step, noise, then (for the first
/// `anomalous_per_batch` samples) the synthetic anomaly.
pub fn draw_batch(
    rng: &mut impl Rng,
    images: &[ImageTensor],
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<TrainSample>> {
    let n_anom = cfg.anomalous_per_batch();
    (0..cfg.batch_size)
        .map(|b| {
            let x = &images[rng.random_range(0..images.len())];
            let t = rng.random_range(1..=schedule.t_max());
            let eps = standard_normal_image(rng, x.channels(), x.height(), x.width());
            let pair = if b < n_anom {
                synthesize_anomaly(x, rng, &cfg.synth)?
            } else {
                SynthPair::normal(x.clone())
            };
            TrainSample::from_pair(&pair, t, &eps, schedule)
        })
        .collect()
}

/// One optimizer update on `samples`; returns the batch loss before the
/// update. A non-finite loss is returned without touching the parameters.
pub fn train_step(model: &mut UNet, opt: &mut Adam, samples: &[TrainSample]) -> Result<f64> {
    let mut g = Graph::new();
    let xs: Vec<&ImageTensor> = samples.iter().map(|s| &s.x_t).collect();
    let ts: Vec<usize> = samples.iter().map(|s| s.t).collect();
    let pred = model.forward(&mut g, &xs, &ts)?;
    let shape = g.value(pred).shape.clone();
    let target = samples
        .iter()
        .flat_map(|s| s.target.data().iter().copied())
        .collect();
    let target = g.input(Tensor::new(shape, target));
    let diff = g.sub(pred, target);
    let loss = g.mean_square(diff);
    let value = g.value(loss).data[0];
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = g.backward(loss);
    let pgrads = g.param_grads(&grads, model.params());
    opt.step(model.params_mut(), &pgrads, None);
    Ok(value)
}

/// Train `model` in place. `on_iteration(i, loss)` is called after each update.
pub fn train(
    model: &mut UNet,
    images: &[ImageTensor],
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    mut on_iteration: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::param("no training images"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(model.params(), cfg.learning_rate);
    let mut report = TrainReport::default();
    for it in 0..cfg.iterations {
        let batch = draw_batch(&mut rng, images, cfg, schedule)?;
        let loss = train_step(model, &mut opt, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it + 1,
                loss,
                lr: cfg.learning_rate,
                t: batch.iter().map(|s| s.t).collect(),
            });
        }
        report.losses.push(loss);
        on_iteration(it + 1, loss);
    }
    Ok(report)
}
