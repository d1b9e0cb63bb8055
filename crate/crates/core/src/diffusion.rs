//! Noise schedule and the closed-form forward/reverse diffusion updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// How β ranges from its first to its last value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Linear interpolation of β between `beta_start` and `beta_end`.
    Linear,
    /// Squared-cosine ᾱ curve; β is clipped to `beta_end`.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleParams {
    pub kind: ScheduleKind,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.kind, self.t_max, self.beta_start, self.beta_end)
    }
}

/// ᾱ_t for t = 0..=T together with the β that produced it. Index 0 is the
/// clean image (ᾱ_0 = 1, β_0 = 0).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    alpha_bar: Vec<f64>,
    beta: Vec<f64>,
}

pub fn make_schedule(
    kind: ScheduleKind,
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::param("schedule needs t_max >= 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::param(format!(
            "betas must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let mut beta = Vec::with_capacity(t_max + 1);
    beta.push(0.0);
    match kind {
        ScheduleKind::Linear => {
            for i in 0..t_max {
                let frac = if t_max == 1 {
                    0.0
                } else {
                    i as f64 / (t_max - 1) as f64
                };
                beta.push(beta_start + (beta_end - beta_start) * frac);
            }
        }
        ScheduleKind::Cosine => {
            const OFFSET: f64 = 0.008;
            let f = |t: f64| {
                let v = ((t / t_max as f64 + OFFSET) / (1.0 + OFFSET)
                    * std::f64::consts::FRAC_PI_2)
                    .cos();
                v * v
            };
            for t in 1..=t_max {
                let b = 1.0 - f(t as f64) / f((t - 1) as f64);
                beta.push(b.clamp(beta_start, beta_end));
            }
        }
    }
    let mut alpha_bar = Vec::with_capacity(t_max + 1);
    let mut acc = 1.0;
    alpha_bar.push(acc);
    for &b in &beta[1..] {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    if alpha_bar.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::param("schedule underflows to alpha_bar = 0"));
    }
    Ok(NoiseSchedule {
        t_max,
        alpha_bar,
        beta,
    })
}

impl NoiseSchedule {
    /// Schedule from explicit `ᾱ_0 = 1, ᾱ_1, …, ᾱ_T`, strictly decreasing
    /// and positive.
    pub fn from_alpha_bars(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 || alpha_bar[0] != 1.0 {
            return Err(Error::param(
                "alpha_bar must start at 1 and have T >= 1 entries after it",
            ));
        }
        if alpha_bar.windows(2).any(|w| !(w[1] < w[0] && w[1] > 0.0)) {
            return Err(Error::param(
                "alpha_bar must be strictly decreasing and positive",
            ));
        }
        let mut beta = vec![0.0];
        beta.extend(alpha_bar.windows(2).map(|w| 1.0 - w[1] / w[0]));
        Ok(Self {
            t_max: alpha_bar.len() - 1,
            alpha_bar,
            beta,
        })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// (√ᾱ_t, √(1−ᾱ_t)).
    #[inline]
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let a = self.alpha_bar[t];
        (a.sqrt(), (1.0 - a).sqrt())
    }

    pub fn check_step(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.t_max {
            return Err(Error::StepOutOfRange {
                t,
                lo,
                hi: self.t_max,
            });
        }
        Ok(())
    }
}

/// x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε.
pub fn diffuse(
    x0: &ImageTensor,
    t: usize,
    eps: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    schedule.check_step(t, 0)?;
    let (a, b) = schedule.coefficients(t);
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Clean estimate x_{t→0} implied by x_t and a noise prediction.
pub fn predict_x0(
    x_t: &ImageTensor,
    t: usize,
    eps_pred: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    schedule.check_step(t, 1)?;
    let (a, b) = schedule.coefficients(t);
    x_t.zip_map(eps_pred, |x, e| (x - b * e) / a)
}

/// Deterministic (η = 0) DDIM update from `t` to `t_prev`.
pub fn ddim_step(
    x_t: &ImageTensor,
    t: usize,
    t_prev: usize,
    eps_pred: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    if t_prev >= t {
        return Err(Error::param(format!(
            "ddim_step needs t_prev < t, got {t_prev} >= {t}"
        )));
    }
    let x0 = predict_x0(x_t, t, eps_pred, schedule)?;
    ddim_from_x0(&x0, t_prev, eps_pred, schedule)
}

/// Re-noise a clean estimate to `t_prev` with the predicted noise; the second
/// half of [`ddim_step`], shared with callers that already hold x_{t→0}.
pub(crate) fn ddim_from_x0(
    x0: &ImageTensor,
    t_prev: usize,
    eps_pred: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    schedule.check_step(t_prev, 0)?;
    let (a, b) = schedule.coefficients(t_prev);
    x0.zip_map(eps_pred, |x, e| a * x + b * e)
}

/// Strided descending step grid `from, from - stride, ..., 0`. The final
/// entry is always 0.
pub fn descending_steps(from: usize, stride: usize) -> Vec<usize> {
    assert!(stride >= 1);
    let mut steps = Vec::with_capacity(from / stride + 2);
    let mut t = from;
    loop {
        steps.push(t);
        if t == 0 {
            break;
        }
        t = t.saturating_sub(stride);
    }
    steps
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(v: f64) -> ImageTensor {
        ImageTensor::new(1, 1, 1, vec![v]).unwrap()
    }

    /// Schedule with a hand-picked ᾱ table; the β column is derived.
    fn schedule_from_alpha_bar(values: &[f64]) -> NoiseSchedule {
        let mut alpha_bar = vec![1.0];
        alpha_bar.extend_from_slice(values);
        let beta = std::iter::once(0.0)
            .chain(alpha_bar.windows(2).map(|w| 1.0 - w[1] / w[0]))
            .collect();
        NoiseSchedule {
            t_max: values.len(),
            alpha_bar,
            beta,
        }
    }

    #[test]
    fn two_step_linear_schedule() {
        let s = make_schedule(ScheduleKind::Linear, 2, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 0.5, 0.25]);
        let s = make_schedule(ScheduleKind::Linear, 1, 0.1, 0.1).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 0.9]);
    }

    #[test]
    fn default_schedule_matches_product_oracle() {
        let s = make_schedule(ScheduleKind::Linear, 1000, 1e-4, 0.02).unwrap();
        // independent: recompute each β from the interpolation formula and multiply
        let mut prod = 1.0f64;
        for i in 1..=1000usize {
            let beta = 1e-4 + (0.02 - 1e-4) * ((i - 1) as f64) / 999.0;
            prod *= 1.0 - beta;
            assert!(((s.alpha_bar(i) - prod) / prod).abs() < 1e-12);
        }
        // frozen value from the oracle above
        assert!((s.alpha_bar(1000) - 4.035_829_765_4e-5).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(make_schedule(ScheduleKind::Linear, 0, 1e-4, 0.02).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 10, 0.0, 0.02).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 10, 0.1, 0.05).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 10, 0.1, 1.0).is_err());
    }

    #[test]
    fn schedules_are_monotone() {
        for (kind, beta_end) in [(ScheduleKind::Linear, 0.02), (ScheduleKind::Cosine, 0.999)] {
            let s = make_schedule(kind, 1000, 1e-4, beta_end).unwrap();
            assert_eq!(s.alpha_bar(0), 1.0);
            for t in 1..=1000 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "{kind:?} t={t}");
                let (a, b) = s.coefficients(t);
                assert!(a > 0.0 && a < 1.0 && b > 0.0 && b < 1.0);
            }
            let mut prod = 1.0;
            for t in 1..=1000 {
                prod *= 1.0 - s.betas()[t];
                assert!(((s.alpha_bar(t) - prod) / prod).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn diffuse_examples() {
        let s = make_schedule(ScheduleKind::Linear, 10, 1e-3, 0.2).unwrap();
        let x0 = ImageTensor::from_fn(3, 4, 4, |c, y, x| (c + y * x) as f64 * 0.1 - 0.5);
        let eps = ImageTensor::from_fn(3, 4, 4, |c, y, x| (c * 7 + y + x) as f64 * 0.01);
        assert_eq!(diffuse(&x0, 0, &eps, &s).unwrap(), x0);

        let s64 = schedule_from_alpha_bar(&[0.64]);
        let out = diffuse(&scalar(1.0), 1, &scalar(0.5), &s64).unwrap();
        assert!((out.data()[0] - 1.1).abs() < 1e-12);

        let z = ImageTensor::zeros(1, 2, 2);
        for t in 0..=10 {
            assert_eq!(diffuse(&z, t, &z, &s).unwrap(), z);
        }
        assert!(diffuse(&x0, 11, &eps, &s).is_err());
        assert!(diffuse(&x0, 1, &z, &s).is_err());
    }

    #[test]
    fn predict_x0_examples() {
        let s = schedule_from_alpha_bar(&[0.25]);
        let out = predict_x0(&scalar(1.0), 1, &scalar(1.0), &s).unwrap();
        assert!((out.data()[0] - 0.267_949).abs() < 1e-6);
        assert!(predict_x0(&scalar(1.0), 0, &scalar(1.0), &s).is_err());
    }

    #[test]
    fn predict_x0_matches_elementwise_oracle() {
        use rand::{Rng, SeedableRng};
        let s = make_schedule(ScheduleKind::Linear, 1000, 1e-4, 0.02).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let t = rng.random_range(1..=1000);
            let xt: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
            let ep: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = predict_x0(
                &ImageTensor::new(1, 4, 4, xt.clone()).unwrap(),
                t,
                &ImageTensor::new(1, 4, 4, ep.clone()).unwrap(),
                &s,
            )
            .unwrap();
            let ab = s.alpha_bar(t);
            for i in 0..16 {
                let want = (xt[i] - (1.0 - ab).sqrt() * ep[i]) / ab.sqrt();
                assert!((got.data()[i] - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn ddim_step_examples() {
        let s = schedule_from_alpha_bar(&[0.81, 0.25]);
        let out = ddim_step(&scalar(1.0), 2, 1, &scalar(1.0), &s).unwrap();
        assert!((out.data()[0] - 0.677_044).abs() < 1e-6);
        assert!(ddim_step(&scalar(1.0), 1, 1, &scalar(1.0), &s).is_err());
        assert!(ddim_step(&scalar(1.0), 1, 2, &scalar(1.0), &s).is_err());

        // zero predictor from zero is a fixed point along the whole chain
        let s = make_schedule(ScheduleKind::Linear, 50, 1e-4, 0.02).unwrap();
        let mut x = ImageTensor::zeros(1, 3, 3);
        let zero = ImageTensor::zeros(1, 3, 3);
        for w in descending_steps(50, 7).windows(2) {
            x = ddim_step(&x, w[0], w[1], &zero, &s).unwrap();
            assert!(x.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn descending_steps_end_at_zero() {
        assert_eq!(descending_steps(10, 4), vec![10, 6, 2, 0]);
        assert_eq!(descending_steps(8, 4), vec![8, 4, 0]);
        assert_eq!(descending_steps(0, 3), vec![0]);
    }

    proptest! {
        #[test]
        fn round_trip_and_true_noise_identity(
            vals in proptest::collection::vec(-1.0f64..1.0, 8),
            noise in proptest::collection::vec(-3.0f64..3.0, 8),
            t in 2usize..=1000,
            dt in 1usize..200,
        ) {
            let s = make_schedule(ScheduleKind::Linear, 1000, 1e-4, 0.02).unwrap();
            let x0 = ImageTensor::new(2, 2, 2, vals).unwrap();
            let eps = ImageTensor::new(2, 2, 2, noise).unwrap();
            let xt = diffuse(&x0, t, &eps, &s).unwrap();
            let back = predict_x0(&xt, t, &eps, &s).unwrap();
            for (a, b) in back.data().iter().zip(x0.data()) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
            let t_prev = t.saturating_sub(dt);
            let stepped = ddim_step(&xt, t, t_prev, &eps, &s).unwrap();
            let direct = diffuse(&x0, t_prev, &eps, &s).unwrap();
            for (a, b) in stepped.data().iter().zip(direct.data()) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }

        #[test]
        fn two_ddim_steps_equal_one_with_constant_predictor(
            vals in proptest::collection::vec(-2.0f64..2.0, 4),
            noise in proptest::collection::vec(-3.0f64..3.0, 4),
            t in 3usize..=1000,
            a in 0.0f64..1.0,
            b in 0.0f64..1.0,
        ) {
            let s = make_schedule(ScheduleKind::Linear, 1000, 1e-4, 0.02).unwrap();
            let (hi, lo) = if a > b { (a, b) } else { (b, a) };
            let mid = ((t - 1) as f64 * hi) as usize + 1;
            let end = ((mid - 1) as f64 * lo) as usize;
            prop_assume!(end < mid && mid < t);
            let xt = ImageTensor::new(1, 2, 2, vals).unwrap();
            let eps = ImageTensor::new(1, 2, 2, noise).unwrap();
            let two = ddim_step(&ddim_step(&xt, t, mid, &eps, &s).unwrap(), mid, end, &eps, &s).unwrap();
            let one = ddim_step(&xt, t, end, &eps, &s).unwrap();
            for (x, y) in two.data().iter().zip(one.data()) {
                prop_assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
            }
        }
    }
}
