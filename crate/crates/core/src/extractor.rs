//! Multi-stage convolutional feature extractor and its fine-tuning loss.
//!
//! The default extractor is a fixed-seed random-weight pyramid: each stage is
//! (2× average pool for stages after the first) → 3×3 conv → SiLU, and every
//! stage output is a feature layer.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, Graph, ParamId, ParamStore, Tensor, Var};
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub in_channels: usize,
    /// Output channels per stage.
    pub channels: Vec<usize>,
    pub init_seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            channels: vec![16, 32, 48, 64],
            init_seed: 1,
        }
    }
}

/// One layer's features, channel-major (`[c, h, w]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width || channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "feature data of length {} does not fit {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Feature vector at `(y, x)`.
    pub fn vector(&self, y: usize, x: usize) -> Vec<f64> {
        let hw = self.height * self.width;
        (0..self.channels)
            .map(|c| self.data[c * hw + y * self.width + x])
            .collect()
    }

    /// Position-major copy (`[h*w, c]`).
    pub fn to_hwc(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; self.data.len()];
        for c in 0..self.channels {
            for p in 0..hw {
                out[p * self.channels + c] = self.data[c * hw + p];
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Stage {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    config: ExtractorConfig,
    params: ParamStore,
    stages: Vec<Stage>,
}

impl FeatureExtractor {
    pub fn new(config: ExtractorConfig) -> Result<Self> {
        if config.in_channels == 0 || config.channels.is_empty() || config.channels.contains(&0) {
            return Err(Error::param(
                "extractor needs at least one stage with positive channels",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let mut cin = config.in_channels;
        let mut stages = Vec::new();
        for (i, &c) in config.channels.iter().enumerate() {
            stages.push(Stage {
                w: params.add_he(format!("stage{i}.w"), vec![c, cin * 9], cin * 9, &mut rng),
                b: params.add_zeros(format!("stage{i}.b"), vec![c]),
            });
            cin = c;
        }
        Ok(Self {
            config,
            params,
            stages,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.stages.len()
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.stages.len() - 1)
    }

    /// Trainable flags for [`Adam::step`] when only the last `n` stages learn.
    pub fn trainable_last(&self, n: usize) -> Vec<bool> {
        let first = self.stages.len().saturating_sub(n);
        let mut out = vec![false; self.params.len()];
        for s in &self.stages[first..] {
            out[s.w.index()] = true;
            out[s.b.index()] = true;
        }
        out
    }

    fn check(&self, x: &ImageTensor) -> Result<()> {
        let m = self.size_multiple();
        if x.channels() != self.config.in_channels
            || !x.height().is_multiple_of(m)
            || !x.width().is_multiple_of(m)
        {
            return Err(Error::shape(format!(
                "extractor expects {} channels and sizes divisible by {m}, got {:?}",
                self.config.in_channels,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Record the forward pass; returns one node per stage.
    pub fn forward(&self, g: &mut Graph, batch: &[&ImageTensor]) -> Result<Vec<Var>> {
        let first = batch.first().ok_or_else(|| Error::param("empty batch"))?;
        let mut data = Vec::new();
        for x in batch {
            self.check(x)?;
            first.check_same_shape(x, "batch image")?;
            data.extend_from_slice(x.data());
        }
        let (c, h, w) = first.shape();
        let mut cur = g.input(Tensor::new(vec![batch.len(), c, h, w], data));
        let mut outs = Vec::with_capacity(self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            if i > 0 {
                cur = g.avg_pool2(cur);
            }
            let wv = g.param(&self.params, s.w);
            let bv = g.param(&self.params, s.b);
            let z = g.conv2d(cur, wv, bv);
            cur = g.silu(z);
            outs.push(cur);
        }
        Ok(outs)
    }

    pub fn extract_batch(&self, batch: &[&ImageTensor]) -> Result<Vec<Vec<FeatureMap>>> {
        let mut g = Graph::new();
        let outs = self.forward(&mut g, batch)?;
        let mut per_image = vec![Vec::with_capacity(outs.len()); batch.len()];
        for v in outs {
            let t = g.value(v);
            let (_, c, h, w) = t.dims4();
            for (i, dst) in per_image.iter_mut().enumerate() {
                dst.push(FeatureMap::new(c, h, w, t.sample(i).to_vec())?);
            }
        }
        Ok(per_image)
    }

    pub fn extract(&self, image: &ImageTensor) -> Result<Vec<FeatureMap>> {
        Ok(self.extract_batch(&[image])?.remove(0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the two distillation terms.
    pub lambda: f64,
    /// Number of final stages that are updated.
    pub trainable_stages: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            batch_size: 16,
            learning_rate: 3e-4,
            lambda: 0.01,
            trainable_stages: 2,
            seed: 0,
        }
    }
}

/// Record the fine-tuning loss
/// `Σ_l d(F_t, F_r) + λ·(Σ_l d(F_t, F̄_t) + Σ_l d(F_r, F̄_r))`, `d = 1 − cos`,
/// where `F̄` are features of the frozen reference extractor.
pub fn finetune_loss(
    g: &mut Graph,
    model: &FeatureExtractor,
    frozen: &FeatureExtractor,
    targets: &[&ImageTensor],
    recons: &[&ImageTensor],
    lambda: f64,
) -> Result<Var> {
    if targets.len() != recons.len() {
        return Err(Error::shape(
            "fine-tuning needs one reconstruction per image",
        ));
    }
    if frozen.num_layers() != model.num_layers() {
        return Err(Error::param("frozen extractor has a different layer count"));
    }
    let ft = model.forward(g, targets)?;
    let fr = model.forward(g, recons)?;
    let bar_t = frozen.extract_batch(targets)?;
    let bar_r = frozen.extract_batch(recons)?;
    let constant = |g: &mut Graph, feats: &[Vec<FeatureMap>], l: usize| {
        let f0 = &feats[0][l];
        let mut data = Vec::with_capacity(feats.len() * f0.data.len());
        for per in feats {
            data.extend_from_slice(&per[l].data);
        }
        g.input(Tensor::new(
            vec![feats.len(), f0.channels, f0.height, f0.width],
            data,
        ))
    };
    let mut terms = Vec::new();
    for l in 0..model.num_layers() {
        let sim = g.cosine_distance(ft[l], fr[l]);
        terms.push((sim, 1.0));
        if lambda != 0.0 {
            let bt = constant(g, &bar_t, l);
            let br = constant(g, &bar_r, l);
            let dt = g.cosine_distance(ft[l], bt);
            let dr = g.cosine_distance(fr[l], br);
            terms.push((dt, lambda));
            terms.push((dr, lambda));
        }
    }
    Ok(g.weighted_sum(terms))
}

/// Fine-tune a copy of `extractor` so features of normal images and of their
/// reconstructions agree. `reconstruct` is called once per image up front.
pub fn finetune_extractor(
    extractor: &FeatureExtractor,
    normal_set: &[ImageTensor],
    mut reconstruct: impl FnMut(&ImageTensor) -> Result<ImageTensor>,
    cfg: &FinetuneConfig,
) -> Result<(FeatureExtractor, Vec<f64>)> {
    if normal_set.is_empty() {
        return Err(Error::param("no images to fine-tune on"));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) || cfg.lambda < 0.0 {
        return Err(Error::param("invalid fine-tuning config"));
    }
    let recons: Vec<ImageTensor> = normal_set
        .iter()
        .map(&mut reconstruct)
        .collect::<Result<_>>()?;
    let frozen = extractor.clone();
    let mut model = extractor.clone();
    let trainable = model.trainable_last(cfg.trainable_stages);
    let mut opt = Adam::new(model.params(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..normal_set.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size.min(normal_set.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let targets: Vec<&ImageTensor> = idx.iter().map(|&i| &normal_set[i]).collect();
        let recon: Vec<&ImageTensor> = idx.iter().map(|&i| &recons[i]).collect();
        let mut g = Graph::new();
        let loss = finetune_loss(&mut g, &model, &frozen, &targets, &recon, cfg.lambda)?;
        let value = g.value(loss).data[0];
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it + 1,
                loss: value,
                lr: cfg.learning_rate,
                t: Vec::new(),
            });
        }
        let grads = g.backward(loss);
        let pg = g.param_grads(&grads, model.params());
        opt.step(model.params_mut(), &pg, Some(&trainable));
        losses.push(value);
    }
    Ok((model, losses))
}
