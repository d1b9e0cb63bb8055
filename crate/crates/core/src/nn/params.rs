use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter arrays in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// He-normal weights for a layer with `fan_in` inputs.
    pub fn add_he(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                std * z
            })
            .collect();
        self.add(name, Tensor::new(shape, data))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Replace all values from `(name, tensor)` pairs; names and shapes must
    /// match the existing layout exactly.
    pub fn load(&mut self, entries: Vec<(String, Tensor)>) -> Result<(), String> {
        if entries.len() != self.values.len() {
            return Err(format!(
                "expected {} parameters, found {}",
                self.values.len(),
                entries.len()
            ));
        }
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(format!(
                    "parameter {i}: expected {}, found {name}",
                    self.names[i]
                ));
            }
            if t.shape != self.values[i].shape {
                return Err(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    self.values[i].shape, t.shape
                ));
            }
            self.values[i] = t;
        }
        Ok(())
    }
}

/// Adam with bias correction and optional global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Apply one update. Parameters with `trainable[i] == false` are left
    /// untouched (and excluded from the clipping norm).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], trainable: Option<&[bool]>) {
        assert_eq!(grads.len(), store.len());
        let is_trainable = |i: usize| trainable.is_none_or(|t| t[i]);
        let scale = match self.clip_norm {
            Some(max) => {
                let norm = grads
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| is_trainable(*i))
                    .flat_map(|(_, g)| g.data.iter())
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, param) in store.values_mut().iter_mut().enumerate() {
            if !is_trainable(i) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in param.data.iter_mut().enumerate() {
                let g = grads[i].data[j] * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
