//! Noise-prediction network ε_θ(x_t, t): a small convolutional UNet with a
//! sinusoidal step embedding injected as per-channel biases.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::tensor::ImageTensor;

/// Anything that predicts the noise component of `x_t` at step `t`.
pub trait NoisePredictor {
    fn predict(&self, x_t: &ImageTensor, t: usize) -> Result<ImageTensor>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Channel multiplier per resolution level; level `i > 0` runs at
    /// `1 / 2^i` of the input size.
    pub channel_mults: Vec<usize>,
    pub time_embed_dim: usize,
    pub init_seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_channels: 16,
            channel_mults: vec![1, 2, 2],
            time_embed_dim: 32,
            init_seed: 0,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.time_embed_dim < 2 {
            return Err(Error::param(
                "unet channels and embedding width must be positive",
            ));
        }
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return Err(Error::param("channel_mults must be non-empty and positive"));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::param("time_embed_dim must be even"));
        }
        Ok(())
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.channel_mults.len() - 1)
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    temb: Layer,
    conv_in: Layer,
    enc: Vec<(Layer, Layer)>,
    mid: (Layer, Layer),
    dec: Vec<(Layer, Layer)>,
    conv_out: Layer,
}

#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    params: ParamStore,
    layout: Layout,
}

/// Sinusoidal embedding of `t` with `dim` entries (sines then cosines).
pub fn step_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    out
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut p = ParamStore::new();
        let d = config.time_embed_dim;
        let ch: Vec<usize> = config
            .channel_mults
            .iter()
            .map(|m| m * config.base_channels)
            .collect();

        let conv =
            |p: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng| Layer {
                w: p.add_he(format!("{name}.w"), vec![cout, cin * 9], cin * 9, rng),
                b: p.add_zeros(format!("{name}.b"), vec![cout]),
            };
        let emb = |p: &mut ParamStore, name: &str, cout: usize, rng: &mut ChaCha8Rng| Layer {
            w: p.add_he(format!("{name}.w"), vec![cout, d], d, rng),
            b: p.add_zeros(format!("{name}.b"), vec![cout]),
        };

        let temb = emb(&mut p, "temb", d, &mut rng);
        let conv_in = conv(&mut p, "conv_in", config.in_channels, ch[0], &mut rng);
        let mut enc = Vec::new();
        for (i, &c) in ch.iter().enumerate() {
            let cin = if i == 0 { ch[0] } else { ch[i - 1] };
            let name = format!("enc{i}");
            enc.push((
                conv(&mut p, &name, cin, c, &mut rng),
                emb(&mut p, &format!("{name}.emb"), c, &mut rng),
            ));
        }
        let last = *ch.last().unwrap();
        let mid = (
            conv(&mut p, "mid", last, last, &mut rng),
            emb(&mut p, "mid.emb", last, &mut rng),
        );
        let mut dec = Vec::new();
        for i in 0..ch.len() - 1 {
            let name = format!("dec{i}");
            dec.push((
                conv(&mut p, &name, ch[i + 1] + ch[i], ch[i], &mut rng),
                emb(&mut p, &format!("{name}.emb"), ch[i], &mut rng),
            ));
        }
        let conv_out = conv(&mut p, "conv_out", ch[0], config.in_channels, &mut rng);
        for v in &mut p.values_mut()[conv_out.w.index()].data {
            *v *= 0.1;
        }
        Ok(Self {
            config,
            params: p,
            layout: Layout {
                temb,
                conv_in,
                enc,
                mid,
                dec,
                conv_out,
            },
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_input(&self, x: &ImageTensor) -> Result<()> {
        let m = self.config.size_multiple();
        if x.channels() != self.config.in_channels {
            return Err(Error::shape(format!(
                "denoiser expects {} channels, got {}",
                self.config.in_channels,
                x.channels()
            )));
        }
        if !x.height().is_multiple_of(m) || !x.width().is_multiple_of(m) {
            return Err(Error::shape(format!(
                "denoiser input {}x{} is not divisible by {m}",
                x.height(),
                x.width()
            )));
        }
        Ok(())
    }

    /// Record a batched forward pass on `g`. All images must share a shape.
    pub fn forward(&self, g: &mut Graph, batch: &[&ImageTensor], steps: &[usize]) -> Result<Var> {
        assert_eq!(batch.len(), steps.len());
        let first = batch.first().ok_or_else(|| Error::param("empty batch"))?;
        for x in batch {
            self.check_input(x)?;
            first.check_same_shape(x, "batch image")?;
        }
        let (c, h, w) = first.shape();
        let n = batch.len();
        let mut data = Vec::with_capacity(n * c * h * w);
        for x in batch {
            data.extend_from_slice(x.data());
        }
        let x = g.input(Tensor::new(vec![n, c, h, w], data));
        let d = self.config.time_embed_dim;
        let mut e = Vec::with_capacity(n * d);
        for &t in steps {
            e.extend(step_embedding(t, d));
        }
        let e = g.input(Tensor::new(vec![n, d], e));

        let p = &self.params;
        let l = &self.layout;
        let lin = |g: &mut Graph, x: Var, layer: Layer| {
            let w = g.param(p, layer.w);
            let b = g.param(p, layer.b);
            g.linear(x, w, b)
        };
        let conv = |g: &mut Graph, x: Var, layer: Layer| {
            let w = g.param(p, layer.w);
            let b = g.param(p, layer.b);
            g.conv2d(x, w, b)
        };
        let block = |g: &mut Graph, x: Var, e: Var, (cl, el): (Layer, Layer)| {
            let hcv = conv(g, x, cl);
            let bias = lin(g, e, el);
            let hb = g.add_channel_bias(hcv, bias);
            g.silu(hb)
        };

        let e = lin(g, e, l.temb);
        let e = g.silu(e);
        let mut h = conv(g, x, l.conv_in);
        let mut skips = Vec::with_capacity(l.enc.len());
        for (i, &layer) in l.enc.iter().enumerate() {
            if i > 0 {
                h = g.avg_pool2(h);
            }
            h = block(g, h, e, layer);
            skips.push(h);
        }
        h = block(g, h, e, l.mid);
        for i in (0..l.dec.len()).rev() {
            let up = g.upsample2(h);
            let cat = g.concat_channels(up, skips[i]);
            h = block(g, cat, e, l.dec[i]);
        }
        Ok(conv(g, h, l.conv_out))
    }

    pub fn predict_batch(
        &self,
        batch: &[&ImageTensor],
        steps: &[usize],
    ) -> Result<Vec<ImageTensor>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, batch, steps)?;
        let v = g.value(out);
        let (_, c, h, w) = v.dims4();
        (0..batch.len())
            .map(|i| ImageTensor::new(c, h, w, v.sample(i).to_vec()))
            .collect()
    }
}

impl NoisePredictor for UNet {
    fn predict(&self, x_t: &ImageTensor, t: usize) -> Result<ImageTensor> {
        Ok(self.predict_batch(&[x_t], &[t])?.remove(0))
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn predict(&self, x_t: &ImageTensor, t: usize) -> Result<ImageTensor> {
        (**self).predict(x_t, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UNetConfig {
        UNetConfig {
            in_channels: 3,
            base_channels: 2,
            channel_mults: vec![1, 2],
            time_embed_dim: 4,
            init_seed: 7,
        }
    }

    #[test]
    fn embedding_matches_closed_form() {
        let e = step_embedding(3, 4);
        // freqs: 1 and 10000^(-1/2) = 0.01
        let want = [3f64.sin(), 0.03f64.sin(), 3f64.cos(), 0.03f64.cos()];
        for (a, b) in e.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn output_shape_and_determinism() {
        let net = UNet::new(tiny()).unwrap();
        assert!(net.num_params() <= 1000);
        let x = ImageTensor::from_fn(3, 8, 8, |c, y, x| ((c + y * x) as f64 * 0.1).sin());
        let a = net.predict(&x, 10).unwrap();
        let b = UNet::new(tiny()).unwrap().predict(&x, 10).unwrap();
        assert_eq!(a.shape(), (3, 8, 8));
        assert_eq!(a, b);
        let c = net.predict(&x, 500).unwrap();
        assert_ne!(a, c, "step conditioning has no effect");
    }

    #[test]
    fn batch_matches_single() {
        let net = UNet::new(tiny()).unwrap();
        let x1 = ImageTensor::from_fn(3, 8, 8, |c, y, x| ((c + y + x) as f64 * 0.2).cos());
        let x2 = x1.map(|v| -v);
        let both = net.predict_batch(&[&x1, &x2], &[3, 900]).unwrap();
        assert!(both[0].max_abs_diff(&net.predict(&x1, 3).unwrap()).unwrap() < 1e-12);
        assert!(
            both[1]
                .max_abs_diff(&net.predict(&x2, 900).unwrap())
                .unwrap()
                < 1e-12
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = UNet::new(tiny()).unwrap();
        assert!(net.predict(&ImageTensor::zeros(1, 8, 8), 1).is_err());
        assert!(net.predict(&ImageTensor::zeros(3, 7, 8), 1).is_err());
        let mut bad = tiny();
        bad.channel_mults.clear();
        assert!(UNet::new(bad).is_err());
    }
}
