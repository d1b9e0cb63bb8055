//! Multi-octave gradient (Perlin-style) noise on a pixel grid.

use rand::Rng;

use crate::tensor::Map2d;

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// One octave of gradient noise with lattice spacing `cell` pixels. Output is
/// roughly in `[-0.7, 0.7]`.
fn gradient_octave(rng: &mut impl Rng, h: usize, w: usize, cell: f64) -> Vec<f64> {
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let grads: Vec<(f64, f64)> = (0..gh * gw)
        .map(|_| {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            (a.cos(), a.sin())
        })
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let fy = (y as f64 + 0.5) / cell;
            let fx = (x as f64 + 0.5) / cell;
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
            let dot = |gy: usize, gx: usize, oy: f64, ox: f64| {
                let (ga, gb) = grads[gy * gw + gx];
                ga * ox + gb * oy
            };
            let n00 = dot(y0, x0, dy, dx);
            let n01 = dot(y0, x0 + 1, dy, dx - 1.0);
            let n10 = dot(y0 + 1, x0, dy - 1.0, dx);
            let n11 = dot(y0 + 1, x0 + 1, dy - 1.0, dx - 1.0);
            let (u, v) = (fade(dx), fade(dy));
            let top = n00 + u * (n01 - n00);
            let bottom = n10 + u * (n11 - n10);
            out.push(top + v * (bottom - top));
        }
    }
    out
}

/// Sum of `octaves` gradient-noise octaves, halving the cell size and the
/// amplitude at each octave, starting from `base_cell`.
pub fn fractal_noise(
    rng: &mut impl Rng,
    h: usize,
    w: usize,
    base_cell: f64,
    octaves: usize,
) -> Map2d {
    let mut acc = vec![0.0; h * w];
    let mut amp = 1.0;
    let mut cell = base_cell;
    for _ in 0..octaves.max(1) {
        let o = gradient_octave(rng, h, w, cell.max(1.0));
        for (a, v) in acc.iter_mut().zip(o) {
            *a += amp * v;
        }
        amp *= 0.5;
        cell *= 0.5;
    }
    Map2d::new(h, w, acc).expect("positive dimensions")
}
