//! The desk-scale setup shared by the trained-model checks: 32×32 stripe
//! toy data, a small UNet and a four-stage extractor.

use anodiff_core::denoiser::{UNet, UNetConfig};
use anodiff_core::diffusion::{NoiseSchedule, ScheduleParams};
use anodiff_core::extractor::{ExtractorConfig, FeatureExtractor};
use anodiff_core::reconstruction::{calibrate_delta, StepSearchConfig};
use anodiff_core::scoring::{Scorer, ScoringParams};
use anodiff_core::tensor::ImageTensor;
use anodiff_core::toy::{make_toy_dataset, ToyConfig, ToyDataset};
use anodiff_core::training::{train, TrainConfig};
use std::time::{Duration, Instant};

pub const SIZE: usize = 32;
pub const STRIDE: usize = 20;
pub const CALIBRATION_SEED: u64 = 9000;

pub fn schedule() -> NoiseSchedule {
    ScheduleParams::default().build().unwrap()
}

/// Training split plus `good` normal and `defects` defective test images.
pub fn toy(good: usize, defects: usize) -> ToyDataset {
    make_toy_dataset(&ToyConfig {
        size: SIZE,
        train_count: 64,
        test_good_count: good,
        defect_count: defects,
        seed: 0,
        ..Default::default()
    })
    .unwrap()
}

/// Train the desk denoiser; `p_anom = 0` gives the plain baseline.
pub fn train_model(p_anom: f64) -> (UNet, Duration) {
    let start = Instant::now();
    let images = toy(1, 0).train;
    let mut net = UNet::new(UNetConfig {
        base_channels: 8,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        iterations: 1500,
        batch_size: 8,
        learning_rate: 2e-3,
        p_anom,
        seed: 0,
        ..Default::default()
    };
    train(&mut net, &images, &cfg, &schedule(), |_, _| {}).unwrap();
    (net, start.elapsed())
}

pub fn scorer(sigma: f64) -> Scorer {
    Scorer {
        extractor: FeatureExtractor::new(ExtractorConfig {
            channels: vec![16, 32, 48, 64],
            ..Default::default()
        })
        .unwrap(),
        params: ScoringParams {
            layers: vec![0, 1, 2, 3],
            sigma,
            top_k: None,
        },
    }
}

/// Search config with δ calibrated on the first 32 training images.
pub fn calibrated(
    net: &UNet,
    scorer: &Scorer,
    train: &[ImageTensor],
    t_start: usize,
    t_min: usize,
) -> StepSearchConfig {
    let cfg = StepSearchConfig {
        t_start,
        t_min,
        stride: STRIDE,
        delta: f64::INFINITY,
        ..Default::default()
    };
    let delta = calibrate_delta(
        net,
        scorer,
        &train[..32],
        &schedule(),
        &cfg,
        CALIBRATION_SEED,
    )
    .unwrap();
    StepSearchConfig { delta, ..cfg }
}
