//! Procedural toy datasets: jittered periodic textures for the normal class,
//! with painted defects (blobs, scratches, off-pattern patches) on part of the
//! test split. Every defect records the pixels it wrote, which become the
//! ground-truth mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Map2d};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureFamily {
    Stripes,
    Weave,
}

impl TextureFamily {
    pub fn name(self) -> &'static str {
        match self {
            TextureFamily::Stripes => "stripes",
            TextureFamily::Weave => "weave",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    Blob,
    Scratch,
    Patch,
}

impl DefectKind {
    pub const ALL: [DefectKind; 3] = [DefectKind::Blob, DefectKind::Scratch, DefectKind::Patch];

    pub fn name(self) -> &'static str {
        match self {
            DefectKind::Blob => "blob",
            DefectKind::Scratch => "scratch",
            DefectKind::Patch => "patch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub family: TextureFamily,
    pub size: usize,
    pub train_count: usize,
    pub test_good_count: usize,
    pub defect_count: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            family: TextureFamily::Stripes,
            size: 64,
            train_count: 64,
            test_good_count: 10,
            defect_count: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    /// File stem, unique within its defect type.
    pub name: String,
    /// `"good"` or a [`DefectKind`] name.
    pub defect_type: String,
    pub image: ImageTensor,
    pub mask: Option<Map2d>,
    /// The defect-free image the defect was painted on.
    pub clean: ImageTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub category: String,
    pub train: Vec<ImageTensor>,
    pub test: Vec<ToySample>,
}

/// Snap to the 8-bit storage grid so a PNG round trip is lossless.
pub fn quantize(x: &ImageTensor) -> ImageTensor {
    x.map(|v| {
        let s = ((v + 1.0) * 0.5 * 255.0).round().clamp(0.0, 255.0);
        s / 255.0 * 2.0 - 1.0
    })
}

const STRIPE_COLORS: [[f64; 3]; 2] = [[0.55, 0.25, -0.35], [-0.45, -0.15, 0.25]];
const WEAVE_COLORS: [[f64; 3]; 2] = [[0.35, -0.05, -0.5], [-0.3, 0.35, 0.1]];

/// A normal texture sample: fixed family parameters plus mild jitter in
/// phase, angle, period and color.
pub fn normal_texture(rng: &mut impl Rng, family: TextureFamily, size: usize) -> ImageTensor {
    let tau = std::f64::consts::TAU;
    let period = (size as f64 / 8.0).max(3.0) * rng.random_range(0.97..1.03);
    let angle: f64 = rng.random_range(-0.04..0.04);
    let (phase_a, phase_b) = (rng.random_range(0.0..tau), rng.random_range(0.0..tau));
    let tint: Vec<f64> = (0..3).map(|_| rng.random_range(-0.03..0.03)).collect();
    let (ca, sa) = (angle.cos(), angle.sin());
    let img = ImageTensor::from_fn(3, size, size, |c, y, x| {
        let (u, v) = (
            x as f64 * ca + y as f64 * sa,
            -(x as f64) * sa + y as f64 * ca,
        );
        let (colors, s) = match family {
            TextureFamily::Stripes => (
                STRIPE_COLORS,
                0.5 + 0.5 * (tau * u / period + phase_a).sin(),
            ),
            TextureFamily::Weave => (
                WEAVE_COLORS,
                0.5 + 0.25
                    * (tau * u / period + phase_a).sin()
                    * (tau * v / (2.0 * period) + phase_b).cos().signum()
                    + 0.25
                        * (tau * v / period + phase_b).sin()
                        * (tau * u / (2.0 * period) + phase_a).sin().signum(),
            ),
        };
        (colors[0][c] * s + colors[1][c] * (1.0 - s) + tint[c]).clamp(-1.0, 1.0)
    });
    let mut data = img.into_data();
    for v in &mut data {
        *v = (*v + rng.random_range(-0.02..0.02)).clamp(-1.0, 1.0);
    }
    quantize(&ImageTensor::new(3, size, size, data).expect("finite texture"))
}

/// Pixels written by a defect, in write order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InjectionLog {
    pub pixels: Vec<(usize, usize)>,
}

impl InjectionLog {
    pub fn to_mask(&self, h: usize, w: usize) -> Map2d {
        let mut m = Map2d::zeros(h, w);
        for &(y, x) in &self.pixels {
            m.set(y, x, 1.0);
        }
        m
    }
}

/// Geometry and color of a painted defect, so the same defect can be re-drawn
/// at another scale.
#[derive(Debug, Clone, PartialEq)]
pub struct DefectSpec {
    pub kind: DefectKind,
    pub center: (f64, f64),
    /// Blob radii, scratch half-length and half-width, or patch half-sizes.
    pub extent: (f64, f64),
    pub angle: f64,
    pub color: [f64; 3],
}

impl DefectSpec {
    pub fn random(rng: &mut impl Rng, kind: DefectKind, size: usize) -> Self {
        let s = size as f64;
        let center = (
            rng.random_range(0.25 * s..0.75 * s),
            rng.random_range(0.25 * s..0.75 * s),
        );
        let extent = match kind {
            DefectKind::Blob => (
                rng.random_range(0.06..0.14) * s,
                rng.random_range(0.06..0.14) * s,
            ),
            DefectKind::Scratch => (
                rng.random_range(0.18..0.3) * s,
                rng.random_range(0.03..0.05) * s,
            ),
            DefectKind::Patch => (
                rng.random_range(0.07..0.12) * s,
                rng.random_range(0.07..0.12) * s,
            ),
        };
        // saturated colors on the far side of the texture palette
        let color = [
            if rng.random_bool(0.5) {
                rng.random_range(0.75..1.0)
            } else {
                rng.random_range(-1.0..-0.75)
            },
            rng.random_range(0.6..1.0),
            rng.random_range(-1.0..-0.6),
        ];
        Self {
            kind,
            center,
            extent,
            angle: rng.random_range(0.0..std::f64::consts::PI),
            color,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            extent: (self.extent.0 * factor, self.extent.1 * factor),
            ..self.clone()
        }
    }

    fn covers(&self, y: usize, x: usize) -> bool {
        let (py, px) = (
            y as f64 + 0.5 - self.center.0,
            x as f64 + 0.5 - self.center.1,
        );
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let (u, v) = (px * c + py * s, -px * s + py * c);
        let (a, b) = (self.extent.0.max(0.5), self.extent.1.max(0.5));
        match self.kind {
            DefectKind::Blob => (u / a).powi(2) + (v / b).powi(2) <= 1.0,
            DefectKind::Scratch => u.abs() <= a && v.abs() <= b,
            DefectKind::Patch => px.abs() <= a && py.abs() <= b,
        }
    }

    /// Paint onto `img`; returns the written pixels.
    pub fn paint(&self, img: &mut ImageTensor) -> InjectionLog {
        let (c, h, w) = img.shape();
        let mut log = InjectionLog::default();
        for y in 0..h {
            for x in 0..w {
                if !self.covers(y, x) {
                    continue;
                }
                for ci in 0..c {
                    let v = match self.kind {
                        DefectKind::Patch => {
                            // checkerboard in the defect color against its inverse
                            let on = ((y / 2) + (x / 2)) % 2 == 0;
                            if on {
                                self.color[ci % 3]
                            } else {
                                -0.6 * self.color[ci % 3]
                            }
                        }
                        _ => self.color[ci % 3],
                    };
                    img.set(ci, y, x, v);
                }
                log.pixels.push((y, x));
            }
        }
        *img = quantize(img);
        log
    }
}

pub fn inject_defect(
    rng: &mut impl Rng,
    clean: &ImageTensor,
    kind: DefectKind,
) -> (ImageTensor, InjectionLog) {
    let spec = DefectSpec::random(rng, kind, clean.height().min(clean.width()));
    let mut img = clean.clone();
    let log = spec.paint(&mut img);
    (img, log)
}

fn validate(cfg: &ToyConfig) -> Result<()> {
    if cfg.size < 8 {
        return Err(Error::param("toy image size must be at least 8"));
    }
    if cfg.train_count < 1 || cfg.test_good_count + cfg.defect_count < 1 {
        return Err(Error::param(
            "toy dataset needs at least one train and one test image",
        ));
    }
    Ok(())
}

pub fn make_toy_dataset(cfg: &ToyConfig) -> Result<ToyDataset> {
    validate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = (0..cfg.train_count)
        .map(|_| normal_texture(&mut rng, cfg.family, cfg.size))
        .collect();
    let mut test = Vec::new();
    for i in 0..cfg.test_good_count {
        let img = normal_texture(&mut rng, cfg.family, cfg.size);
        test.push(ToySample {
            name: format!("{i:03}"),
            defect_type: "good".into(),
            clean: img.clone(),
            image: img,
            mask: None,
        });
    }
    let mut per_kind = [0usize; 3];
    for i in 0..cfg.defect_count {
        let k = i % DefectKind::ALL.len();
        let kind = DefectKind::ALL[k];
        let clean = normal_texture(&mut rng, cfg.family, cfg.size);
        let (image, log) = inject_defect(&mut rng, &clean, kind);
        test.push(ToySample {
            name: format!("{:03}", per_kind[k]),
            defect_type: kind.name().into(),
            image,
            mask: Some(log.to_mask(cfg.size, cfg.size)),
            clean,
        });
        per_kind[k] += 1;
    }
    Ok(ToyDataset {
        category: cfg.family.name().into(),
        train,
        test,
    })
}

/// A base image with the same blob painted at two scales.
#[derive(Debug, Clone)]
pub struct ControlledPair {
    pub base: ImageTensor,
    pub small: ImageTensor,
    pub small_mask: Map2d,
    pub large: ImageTensor,
    pub large_mask: Map2d,
}

pub fn controlled_pair(
    rng: &mut impl Rng,
    family: TextureFamily,
    size: usize,
    small_radius: f64,
    large_radius: f64,
) -> ControlledPair {
    let base = normal_texture(rng, family, size);
    let mut spec = DefectSpec::random(rng, DefectKind::Blob, size);
    spec.center = (size as f64 / 2.0, size as f64 / 2.0);
    let small_spec = DefectSpec {
        extent: (small_radius, small_radius),
        ..spec.clone()
    };
    let large_spec = DefectSpec {
        extent: (large_radius, large_radius),
        ..spec
    };
    let mut small = base.clone();
    let small_mask = small_spec.paint(&mut small).to_mask(size, size);
    let mut large = base.clone();
    let large_mask = large_spec.paint(&mut large).to_mask(size, size);
    ControlledPair {
        base,
        small,
        small_mask,
        large,
        large_mask,
    }
}
