//! A small reverse-mode autodiff tape.
//!
//! Every forward pass records its nodes on a fresh [`Graph`]; calling
//! [`Graph::backward`] on a scalar node yields gradients for every node,
//! from which parameter gradients are gathered. The op set is exactly what the
//! denoiser and the feature extractor need.

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    /// 3x3 (or k×k) same-padded, stride-1 convolution. Weight `[o, c*k*k]`.
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        k: usize,
    },
    /// `x [n, d] · wᵀ + b`, weight `[o, d]`.
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    /// Adds a per-sample, per-channel bias `[n, c]` to `[n, c, h, w]`.
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    Silu(Var),
    AvgPool2(Var),
    Upsample2(Var),
    ConcatChannels(Var, Var),
    Sub(Var, Var),
    /// Mean of squared entries, a scalar.
    MeanSquare(Var),
    /// Batch mean of `1 - cos(a_i, b_i)` over flattened samples, a scalar.
    CosineDistance {
        a: Var,
        b: Var,
    },
    /// Σ wᵢ·sᵢ over scalar nodes.
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Destination columns `[lo, hi)` that read a valid source column when the
/// kernel tap is shifted by `d`, for rows of width `w`.
#[inline]
fn valid_range(d: isize, w: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (w as isize - d).clamp(0, w as isize) as usize;
    (lo.min(hi), hi)
}

/// Unfold one `[c, h, w]` sample into rows `r` of `col` starting at
/// `r * stride + offset` (row `r` = channel × kernel offset).
fn im2col(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    k: usize,
    col: &mut [f64],
    stride: usize,
    offset: usize,
) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (lo, hi) = valid_range(dx, w);
                let r = (ci * k + ky) * k + kx;
                let row = &mut col[r * stride + offset..][..hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || lo >= hi {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    let s0 = (lo as isize + dx) as usize;
                    dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate rows back into `dx`.
fn col2im(
    col: &[f64],
    (c, h, w): (usize, usize, usize),
    k: usize,
    dx: &mut [f64],
    stride: usize,
    offset: usize,
) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let ddx = kx as isize - pad;
                let (lo, hi) = valid_range(ddx, w);
                if lo >= hi {
                    continue;
                }
                let r = (ci * k + ky) * k + kx;
                let row = &col[r * stride + offset..][..hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (lo as isize + ddx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..][..hi - lo];
                    add_into(dst, &row[y * w + lo..y * w + hi]);
                }
            }
        }
    }
}

/// Whole-batch unfold: `[c*k*k, n*h*w]`.
fn im2col_batch(x: &[f64], (n, c, h, w): (usize, usize, usize, usize), k: usize) -> Vec<f64> {
    let hw = h * w;
    let mut col = vec![0.0; c * k * k * n * hw];
    for i in 0..n {
        im2col(
            &x[i * c * hw..(i + 1) * c * hw],
            (c, h, w),
            k,
            &mut col,
            n * hw,
            i * hw,
        );
    }
    col
}

fn cosine(a: &[f64], b: &[f64]) -> (f64, f64, f64, f64) {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = (na * nb).sqrt();
    let cos = if denom > 0.0 { dot / denom } else { 0.0 };
    (cos, dot, na, nb)
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let (o, ckk) = self.value(w).dims2();
        let k = ((ckk / c) as f64).sqrt().round() as usize;
        assert_eq!(c * k * k, ckk, "conv weight does not match input channels");
        assert_eq!(self.value(b).len(), o);
        let hw = h * wd;
        let cols = n * hw;
        let col = im2col_batch(&self.value(x).data, (n, c, h, wd), k);
        let mut tmp = vec![0.0; o * cols];
        gemm(
            o,
            ckk,
            cols,
            &self.value(w).data,
            (ckk, 1),
            &col,
            (cols, 1),
            &mut tmp,
            0.0,
        );
        let bv = &self.value(b).data;
        let mut out = vec![0.0; n * o * hw];
        for i in 0..n {
            for oc in 0..o {
                let src = &tmp[oc * cols + i * hw..][..hw];
                let dst = &mut out[(i * o + oc) * hw..][..hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bv[oc];
                }
            }
        }
        self.push(
            Tensor::new(vec![n, o, h, wd], out),
            Op::Conv2d { x, w, b, k },
        )
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, d) = self.value(x).dims2();
        let (o, d2) = self.value(w).dims2();
        assert_eq!(d, d2, "linear weight does not match input width");
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(&self.value(b).data);
        }
        gemm(
            n,
            d,
            o,
            &self.value(x).data,
            (d, 1),
            &self.value(w).data,
            (1, d),
            &mut out,
            1.0,
        );
        self.push(Tensor::new(vec![n, o], out), Op::Linear { x, w, b })
    }

    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(bias).shape, vec![n, c]);
        let hw = h * w;
        let mut out = self.value(x).data.clone();
        let bv = &self.value(bias).data;
        for (i, chunk) in out.chunks_mut(hw).enumerate() {
            let b = bv[i];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        self.push(
            Tensor::new(vec![n, c, h, w], out),
            Op::AddChannelBias { x, bias },
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = v.data.iter().map(|&z| z * sigmoid(z)).collect();
        let shape = v.shape.clone();
        self.push(Tensor::new(shape, out), Op::Silu(x))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(
            h % 2 == 0 && w % 2 == 0,
            "avg_pool2 needs even spatial size"
        );
        let (oh, ow) = (h / 2, w / 2);
        let xv = &self.value(x).data;
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xo in 0..ow {
                    let s = src[2 * y * w + 2 * xo]
                        + src[2 * y * w + 2 * xo + 1]
                        + src[(2 * y + 1) * w + 2 * xo]
                        + src[(2 * y + 1) * w + 2 * xo + 1];
                    dst[y * ow + xo] = 0.25 * s;
                }
            }
        }
        self.push(Tensor::new(vec![n, c, oh, ow], out), Op::AvgPool2(x))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (oh, ow) = (h * 2, w * 2);
        let xv = &self.value(x).data;
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xo in 0..ow {
                    dst[y * ow + xo] = src[(y / 2) * w + xo / 2];
                }
            }
        }
        self.push(Tensor::new(vec![n, c, oh, ow], out), Op::Upsample2(x))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (n2, cb, h2, w2) = self.value(b).dims4();
        assert_eq!(
            (n, h, w),
            (n2, h2, w2),
            "concat needs matching batch and size"
        );
        let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            out.extend_from_slice(self.value(a).sample(i));
            out.extend_from_slice(self.value(b).sample(i));
        }
        self.push(
            Tensor::new(vec![n, ca + cb, h, w], out),
            Op::ConcatChannels(a, b),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape, self.value(b).shape);
        let out = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, out), Op::Sub(a, b))
    }

    pub fn mean_square(&mut self, x: Var) -> Var {
        let v = &self.value(x).data;
        let s = v.iter().map(|z| z * z).sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::MeanSquare(x))
    }

    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape, self.value(b).shape);
        let n = self.value(a).shape[0];
        let mut total = 0.0;
        for i in 0..n {
            total += 1.0 - cosine(self.value(a).sample(i), self.value(b).sample(i)).0;
        }
        self.push(
            Tensor::scalar(total / n as f64),
            Op::CosineDistance { a, b },
        )
    }

    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let s = terms
            .iter()
            .map(|&(v, wgt)| {
                assert_eq!(self.value(v).len(), 1, "weighted_sum takes scalars");
                wgt * self.value(v).data[0]
            })
            .sum();
        self.push(Tensor::scalar(s), Op::WeightedSum(terms))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], f: impl FnOnce(&mut [f64])) {
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.to_vec()));
            f(&mut slot.data);
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                &Op::Conv2d { x, w, b, k } => {
                    let xv = self.value(x);
                    let (n, c, h, wd) = xv.dims4();
                    let wv = self.value(w);
                    let (o, ckk) = wv.dims2();
                    let hw = h * wd;
                    let cols = n * hw;
                    let mut gy = vec![0.0; o * cols];
                    let mut db = vec![0.0; o];
                    for i in 0..n {
                        for oc in 0..o {
                            let src = &g.data[(i * o + oc) * hw..][..hw];
                            db[oc] += src.iter().sum::<f64>();
                            gy[oc * cols + i * hw..][..hw].copy_from_slice(src);
                        }
                    }
                    let col = im2col_batch(&xv.data, (n, c, h, wd), k);
                    // dW = dY · colᵀ
                    let mut dw = vec![0.0; o * ckk];
                    gemm(o, cols, ckk, &gy, (cols, 1), &col, (1, cols), &mut dw, 0.0);
                    // dcol = Wᵀ · dY
                    let mut dcol = col;
                    gemm(
                        ckk,
                        o,
                        cols,
                        &wv.data,
                        (1, ckk),
                        &gy,
                        (cols, 1),
                        &mut dcol,
                        0.0,
                    );
                    let mut dx = vec![0.0; n * c * hw];
                    for i in 0..n {
                        col2im(
                            &dcol,
                            (c, h, wd),
                            k,
                            &mut dx[i * c * hw..(i + 1) * c * hw],
                            cols,
                            i * hw,
                        );
                    }
                    acc(&mut grads, x, &xv.shape, |d| add_into(d, &dx));
                    acc(&mut grads, w, &wv.shape, |d| add_into(d, &dw));
                    acc(&mut grads, b, &[o], |d| add_into(d, &db));
                }
                &Op::Linear { x, w, b } => {
                    let xv = self.value(x);
                    let (n, d) = xv.dims2();
                    let wv = self.value(w);
                    let (o, _) = wv.dims2();
                    let mut dx = vec![0.0; n * d];
                    gemm(n, o, d, &g.data, (o, 1), &wv.data, (d, 1), &mut dx, 0.0);
                    let mut dw = vec![0.0; o * d];
                    gemm(o, n, d, &g.data, (1, o), &xv.data, (d, 1), &mut dw, 0.0);
                    let mut db = vec![0.0; o];
                    for row in g.data.chunks(o) {
                        add_into(&mut db, row);
                    }
                    acc(&mut grads, x, &xv.shape, |t| add_into(t, &dx));
                    acc(&mut grads, w, &wv.shape, |t| add_into(t, &dw));
                    acc(&mut grads, b, &[o], |t| add_into(t, &db));
                }
                &Op::AddChannelBias { x, bias } => {
                    let (n, c, h, w) = self.value(x).dims4();
                    let hw = h * w;
                    let mut dbias = vec![0.0; n * c];
                    for (i, chunk) in g.data.chunks(hw).enumerate() {
                        dbias[i] = chunk.iter().sum();
                    }
                    acc(&mut grads, x, &[n, c, h, w], |t| add_into(t, &g.data));
                    acc(&mut grads, bias, &[n, c], |t| add_into(t, &dbias));
                }
                &Op::Silu(x) => {
                    let xv = self.value(x);
                    acc(&mut grads, x, &xv.shape, |t| {
                        for ((d, &z), &gy) in t.iter_mut().zip(&xv.data).zip(&g.data) {
                            let s = sigmoid(z);
                            *d += gy * s * (1.0 + z * (1.0 - s));
                        }
                    });
                }
                &Op::AvgPool2(x) => {
                    let (n, c, h, w) = self.value(x).dims4();
                    let (oh, ow) = (h / 2, w / 2);
                    acc(&mut grads, x, &[n, c, h, w], |t| {
                        for p in 0..n * c {
                            let src = &g.data[p * oh * ow..(p + 1) * oh * ow];
                            let dst = &mut t[p * h * w..(p + 1) * h * w];
                            for y in 0..h {
                                for xo in 0..w {
                                    dst[y * w + xo] += 0.25 * src[(y / 2) * ow + xo / 2];
                                }
                            }
                        }
                    });
                }
                &Op::Upsample2(x) => {
                    let (n, c, h, w) = self.value(x).dims4();
                    let (oh, ow) = (h * 2, w * 2);
                    acc(&mut grads, x, &[n, c, h, w], |t| {
                        for p in 0..n * c {
                            let src = &g.data[p * oh * ow..(p + 1) * oh * ow];
                            let dst = &mut t[p * h * w..(p + 1) * h * w];
                            for y in 0..oh {
                                for xo in 0..ow {
                                    dst[(y / 2) * w + xo / 2] += src[y * ow + xo];
                                }
                            }
                        }
                    });
                }
                &Op::ConcatChannels(a, b) => {
                    let sa = self.value(a).shape.clone();
                    let sb = self.value(b).shape.clone();
                    let n = sa[0];
                    let la = self.value(a).len() / n;
                    let lb = self.value(b).len() / n;
                    acc(&mut grads, a, &sa, |t| {
                        for i in 0..n {
                            add_into(&mut t[i * la..(i + 1) * la], &g.data[i * (la + lb)..][..la]);
                        }
                    });
                    acc(&mut grads, b, &sb, |t| {
                        for i in 0..n {
                            add_into(
                                &mut t[i * lb..(i + 1) * lb],
                                &g.data[i * (la + lb) + la..][..lb],
                            );
                        }
                    });
                }
                &Op::Sub(a, b) => {
                    let shape = self.value(a).shape.clone();
                    acc(&mut grads, a, &shape, |t| add_into(t, &g.data));
                    acc(&mut grads, b, &shape, |t| {
                        t.iter_mut().zip(&g.data).for_each(|(d, gy)| *d -= gy)
                    });
                }
                &Op::MeanSquare(x) => {
                    let xv = self.value(x);
                    let scale = 2.0 * g.data[0] / xv.len() as f64;
                    acc(&mut grads, x, &xv.shape, |t| {
                        t.iter_mut()
                            .zip(&xv.data)
                            .for_each(|(d, z)| *d += scale * z)
                    });
                }
                &Op::CosineDistance { a, b } => {
                    let av = self.value(a);
                    let bv = self.value(b);
                    let n = av.shape[0];
                    let per = av.len() / n;
                    let mut da = vec![0.0; av.len()];
                    let mut db = vec![0.0; bv.len()];
                    let gs = g.data[0] / n as f64;
                    for i in 0..n {
                        let (xa, xb) = (av.sample(i), bv.sample(i));
                        let (cos, _, na, nb) = cosine(xa, xb);
                        let denom = (na * nb).sqrt();
                        if denom == 0.0 {
                            continue;
                        }
                        // d(1 - cos)/da = -(b/|a||b| - cos·a/|a|²)
                        for j in 0..per {
                            da[i * per + j] -= gs * (xb[j] / denom - cos * xa[j] / na);
                            db[i * per + j] -= gs * (xa[j] / denom - cos * xb[j] / nb);
                        }
                    }
                    acc(&mut grads, a, &av.shape, |t| add_into(t, &da));
                    acc(&mut grads, b, &bv.shape, |t| add_into(t, &db));
                }
                Op::WeightedSum(terms) => {
                    for &(v, wgt) in terms {
                        acc(&mut grads, v, &[1], |t| t[0] += wgt * g.data[0]);
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Sum the gradients of every node that reads parameter storage, aligned
    /// with `store`'s parameter order. Unused parameters get zero gradients.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape.clone()))
            .collect();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &grads.grads[idx] {
                    add_into(&mut out[id.index()].data, &g.data);
                }
            }
        }
        out
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks d(loss)/d(input) for one input tensor by central differences.
    fn check_input_grad(shape: Vec<usize>, build: impl Fn(&mut Graph, Var) -> Var, seed: u64) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x0 = rand_tensor(&mut rng, shape);
        let eval = |x: &Tensor| {
            let mut g = Graph::new();
            let v = g.input(x.clone());
            let l = build(&mut g, v);
            g.value(l).data[0]
        };
        let mut g = Graph::new();
        let v = g.input(x0.clone());
        let l = build(&mut g, v);
        let grads = g.backward(l);
        let analytic = grads
            .get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x0.shape.clone()));
        let h = 1e-5;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data[i] += h;
            let mut xm = x0.clone();
            xm.data[i] -= h;
            let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
            let a = analytic.data[i];
            assert!(
                (fd - a).abs() <= 1e-6 + 1e-5 * fd.abs().max(a.abs()),
                "coordinate {i}: fd {fd} vs analytic {a}"
            );
        }
    }

    #[test]
    fn conv_grad_wrt_input_and_weights() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let w = rand_tensor(&mut rng, vec![3, 2 * 9]);
        let b = rand_tensor(&mut rng, vec![3]);
        let (w2, b2) = (w.clone(), b.clone());
        check_input_grad(
            vec![2, 2, 4, 5],
            move |g, x| {
                let wv = g.input(w2.clone());
                let bv = g.input(b2.clone());
                let y = g.conv2d(x, wv, bv);
                let s = g.silu(y);
                g.mean_square(s)
            },
            2,
        );
        let x = rand_tensor(&mut rng, vec![2, 2, 4, 5]);
        check_input_grad(
            vec![3, 18],
            move |g, wv| {
                let xv = g.input(x.clone());
                let bv = g.input(b.clone());
                let y = g.conv2d(xv, wv, bv);
                g.mean_square(y)
            },
            3,
        );
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, vec![1, 2, 3, 4]);
        let w = rand_tensor(&mut rng, vec![2, 18]);
        let b = rand_tensor(&mut rng, vec![2]);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
        let y = g.conv2d(xv, wv, bv);
        let out = g.value(y);
        for o in 0..2 {
            for yy in 0..3i32 {
                for xx in 0..4i32 {
                    let mut s = b.data[o];
                    for c in 0..2 {
                        for ky in 0..3i32 {
                            for kx in 0..3i32 {
                                let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                                if (0..3).contains(&sy) && (0..4).contains(&sx) {
                                    s += w.data[o * 18 + c * 9 + (ky * 3 + kx) as usize]
                                        * x.data[(c * 3 + sy as usize) * 4 + sx as usize];
                                }
                            }
                        }
                    }
                    let got = out.data[(o * 3 + yy as usize) * 4 + xx as usize];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn structural_ops_grads() {
        check_input_grad(
            vec![2, 3, 4, 4],
            |g, x| {
                let p = g.avg_pool2(x);
                let u = g.upsample2(p);
                let c = g.concat_channels(u, x);
                let s = g.silu(c);
                g.mean_square(s)
            },
            4,
        );
    }

    #[test]
    fn linear_and_bias_grads() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let w = rand_tensor(&mut rng, vec![3, 4]);
        let b = rand_tensor(&mut rng, vec![3]);
        let img = rand_tensor(&mut rng, vec![2, 3, 2, 2]);
        check_input_grad(
            vec![2, 4],
            move |g, x| {
                let wv = g.input(w.clone());
                let bv = g.input(b.clone());
                let e = g.linear(x, wv, bv);
                let i = g.input(img.clone());
                let y = g.add_channel_bias(i, e);
                let s = g.silu(y);
                g.mean_square(s)
            },
            6,
        );
    }

    #[test]
    fn cosine_and_sum_grads() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let other = rand_tensor(&mut rng, vec![2, 6]);
        check_input_grad(
            vec![2, 6],
            move |g, x| {
                let o = g.input(other.clone());
                let c1 = g.cosine_distance(x, o);
                let d = g.sub(x, o);
                let m = g.mean_square(d);
                g.weighted_sum(vec![(c1, 1.0), (m, 0.3)])
            },
            8,
        );
    }

    #[test]
    fn cosine_distance_of_zero_vector_is_one() {
        let mut g = Graph::new();
        let a = g.input(Tensor::new(vec![1, 3], vec![0.0; 3]));
        let b = g.input(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]));
        let d = g.cosine_distance(a, b);
        assert_eq!(g.value(d).data[0], 1.0);
    }
}
