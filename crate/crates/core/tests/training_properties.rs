use anodiff_core::denoiser::{NoisePredictor, UNet, UNetConfig};
use anodiff_core::diffusion::{diffuse, NoiseSchedule, ScheduleParams};
use anodiff_core::nn::{Adam, Graph, Tensor};
use anodiff_core::synth::{blend, SynthPair};
use anodiff_core::tensor::{ImageTensor, Map2d};
use anodiff_core::toy::{make_toy_dataset, ToyConfig};
use anodiff_core::training::{
    atp_loss, atp_target, standard_loss, standard_normal_image, train, TrainConfig,
};
use anodiff_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Fixed(ImageTensor);

impl NoisePredictor for Fixed {
    fn predict(&self, _x_t: &ImageTensor, _t: usize) -> Result<ImageTensor> {
        Ok(self.0.clone())
    }
}

struct Squash;

impl NoisePredictor for Squash {
    fn predict(&self, x_t: &ImageTensor, t: usize) -> Result<ImageTensor> {
        Ok(x_t.map(|v| (v * (1.0 + t as f64 * 1e-3)).tanh()))
    }
}

fn schedule() -> NoiseSchedule {
    ScheduleParams::default().build().unwrap()
}

/// 4×4 pair blended by hand; the mask generator needs larger images.
fn pair(rng: &mut ChaCha8Rng) -> SynthPair {
    let x = ImageTensor::from_fn(3, 4, 4, |_, _, _| rng.random_range(-1.0..1.0));
    let texture = ImageTensor::from_fn(3, 4, 4, |_, _, _| rng.random_range(-1.0..1.0));
    let mask = Map2d::from_fn(4, 4, |_, _| rng.random_range(0..2) as f64);
    blend(&x, &mask, rng.random_range(0.1..1.0), &texture).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_matches_an_elementwise_recomputation(seed in any::<u64>(), t in 1usize..=1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = schedule();
        let p = pair(&mut rng);
        let eps = standard_normal_image(&mut rng, 3, 4, 4);
        let got = atp_loss(&Squash, &p, t, &eps, &s).unwrap();
        let ab = s.alpha_bar(t);
        let mut sum = 0.0;
        for i in 0..p.x_a.len() {
            let xt = ab.sqrt() * p.x_a.data()[i] + (1.0 - ab).sqrt() * eps.data()[i];
            let pred = (xt * (1.0 + t as f64 * 1e-3)).tanh();
            let target = eps.data()[i] + (ab / (1.0 - ab)).sqrt() * p.n.data()[i];
            sum += (target - pred).powi(2);
        }
        let want = sum / p.x_a.len() as f64;
        prop_assert!((got - want).abs() <= 1e-6 * want.max(1.0));
        prop_assert!(got >= 0.0);
    }

    #[test]
    fn perfect_predictor_has_zero_loss(seed in any::<u64>(), t in 1usize..=1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = schedule();
        let p = pair(&mut rng);
        let eps = standard_normal_image(&mut rng, 3, 4, 4);
        let target = atp_target(&eps, &p.n, t, &s).unwrap();
        prop_assert_eq!(atp_loss(&Fixed(target.clone()), &p, t, &eps, &s).unwrap(), 0.0);
        let off = target.map(|v| v + 1e-3);
        prop_assert!(atp_loss(&Fixed(off), &p, t, &eps, &s).unwrap() > 0.0);
    }

    #[test]
    fn normal_pairs_reduce_to_the_standard_loss(seed in any::<u64>(), t in 1usize..=1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = schedule();
        let x = ImageTensor::from_fn(3, 4, 4, |_, _, _| rng.random_range(-1.0..1.0));
        let eps = standard_normal_image(&mut rng, 3, 4, 4);
        let atp = atp_loss(&Squash, &SynthPair::normal(x.clone()), t, &eps, &s).unwrap();
        prop_assert_eq!(atp.to_bits(), standard_loss(&Squash, &x, t, &eps, &s).unwrap().to_bits());
    }
}

fn tiny_unet() -> UNetConfig {
    UNetConfig {
        base_channels: 4,
        channel_mults: vec![1, 2],
        time_embed_dim: 8,
        ..Default::default()
    }
}

fn stripes(n: usize, size: usize) -> Vec<ImageTensor> {
    make_toy_dataset(&ToyConfig {
        size,
        train_count: n,
        test_good_count: 1,
        defect_count: 0,
        ..Default::default()
    })
    .unwrap()
    .train
}

#[test]
fn normal_only_training_is_plain_denoiser_training() {
    let s = schedule();
    let images = stripes(6, 8);
    let cfg = TrainConfig {
        iterations: 6,
        batch_size: 3,
        learning_rate: 1e-3,
        p_anom: 0.0,
        seed: 21,
        ..Default::default()
    };
    let mut trained = UNet::new(tiny_unet()).unwrap();
    let report = train(&mut trained, &images, &cfg, &s, |_, _| {}).unwrap();

    // the textbook loop: pick image, step and noise, regress onto the noise
    let mut reference = UNet::new(tiny_unet()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(reference.params(), cfg.learning_rate);
    let mut losses = Vec::new();
    for _ in 0..cfg.iterations {
        let mut xs = Vec::new();
        let mut ts = Vec::new();
        let mut target = Vec::new();
        for _ in 0..cfg.batch_size {
            let x = &images[rng.random_range(0..images.len())];
            let t = rng.random_range(1..=s.t_max());
            let eps = standard_normal_image(&mut rng, 3, 8, 8);
            xs.push(diffuse(x, t, &eps, &s).unwrap());
            ts.push(t);
            target.extend_from_slice(eps.data());
        }
        let mut g = Graph::new();
        let refs: Vec<&ImageTensor> = xs.iter().collect();
        let pred = reference.forward(&mut g, &refs, &ts).unwrap();
        let shape = g.value(pred).shape.clone();
        let target = g.input(Tensor::new(shape, target));
        let diff = g.sub(pred, target);
        let loss = g.mean_square(diff);
        losses.push(g.value(loss).data[0]);
        let grads = g.backward(loss);
        let pg = g.param_grads(&grads, reference.params());
        opt.step(reference.params_mut(), &pg, None);
    }
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&report.losses), bits(&losses));
    for ((_, a), (_, b)) in trained.params().iter().zip(reference.params().iter()) {
        assert_eq!(bits(&a.data), bits(&b.data));
    }
}

#[test]
fn training_reduces_the_loss_and_is_deterministic() {
    let s = schedule();
    let images = stripes(32, 16);
    let cfg = TrainConfig {
        iterations: 500,
        batch_size: 8,
        learning_rate: 2e-3,
        p_anom: 0.5,
        seed: 1,
        ..Default::default()
    };
    let net_cfg = UNetConfig {
        base_channels: 8,
        ..Default::default()
    };
    let mut a = UNet::new(net_cfg.clone()).unwrap();
    let ra = train(&mut a, &images, &cfg, &s, |_, _| {}).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (first, last) = (mean(&ra.losses[..50]), mean(&ra.losses[450..]));
    assert!(last < first, "loss {first} -> {last}");

    let short = TrainConfig {
        iterations: 20,
        ..cfg
    };
    let (mut b, mut c) = (
        UNet::new(net_cfg.clone()).unwrap(),
        UNet::new(net_cfg).unwrap(),
    );
    let rb = train(&mut b, &images, &short, &s, |_, _| {}).unwrap();
    let rc = train(&mut c, &images, &short, &s, |_, _| {}).unwrap();
    assert_eq!(rb, rc);
    assert_eq!(rb.losses[..], ra.losses[..20]);
}

#[test]
fn empty_dataset_is_rejected() {
    let mut net = UNet::new(tiny_unet()).unwrap();
    assert!(train(
        &mut net,
        &[],
        &TrainConfig::default(),
        &schedule(),
        |_, _| {}
    )
    .is_err());
}
