//! Lossless image and map files.
//!
//! Images are 8-bit RGB PNGs in storage range. Anomaly maps are written two
//! ways: a 16-bit grayscale PNG, min-max normalized, with a sidecar
//! `<file>.txt` holding `min` and `max`; and a raw `AMAP` file:
//!
//! ```text
//! b"AMAP" | u32 version (=1) | u32 height | u32 width | height*width f64
//! ```
//!
//! all little-endian, values row-major.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::scoring::resize_bilinear;
use crate::tensor::{ImageTensor, Map2d};

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn to_u8(storage: f64) -> u8 {
    (storage * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Decode any supported file as RGB into model range.
pub fn read_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor(img: &RgbImage) -> ImageTensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    ImageTensor::from_fn(3, h, w, |c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0 * 2.0 - 1.0
    })
}

/// First three channels (or the single channel repeated) as 8-bit RGB.
pub fn tensor_to_rgb(x: &ImageTensor) -> RgbImage {
    let (c, h, w) = x.shape();
    ImageBuffer::from_fn(w as u32, h as u32, |px, py| {
        let v = |ci: usize| to_u8((x.get(ci.min(c - 1), py as usize, px as usize) + 1.0) * 0.5);
        Rgb([v(0), v(1), v(2)])
    })
}

pub fn write_image(x: &ImageTensor, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    tensor_to_rgb(x).save(path).map_err(|e| image_err(path, e))
}

/// Bilinear resize of every channel.
pub fn resize_image(x: &ImageTensor, h: usize, w: usize) -> ImageTensor {
    let (c, ih, iw) = x.shape();
    if (ih, iw) == (h, w) {
        return x.clone();
    }
    let planes: Vec<Map2d> = (0..c)
        .map(|ci| resize_bilinear(&Map2d::from_fn(ih, iw, |y, xx| x.get(ci, y, xx)), h, w))
        .collect();
    ImageTensor::from_fn(c, h, w, |ci, y, xx| planes[ci].get(y, xx))
}

/// Binary mask: luminance above 127 is anomalous.
pub fn read_mask(path: &Path) -> Result<Map2d> {
    let img = image::open(path)
        .map_err(|e| image_err(path, e))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Map2d::from_fn(h, w, |y, x| {
        if img.get_pixel(x as u32, y as u32)[0] > 127 {
            1.0
        } else {
            0.0
        }
    }))
}

/// Bilinear resize followed by a 0.5 threshold.
pub fn resize_mask(m: &Map2d, h: usize, w: usize) -> Map2d {
    resize_bilinear(m, h, w).map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

pub fn write_mask(m: &Map2d, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let img: GrayImage = ImageBuffer::from_fn(m.width() as u32, m.height() as u32, |x, y| {
        Luma([if m.get(y as usize, x as usize) > 0.5 {
            255
        } else {
            0
        }])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Clamp `[0, 1]` values to 8-bit gray, e.g. for SAFF masks.
pub fn write_unit_map(m: &Map2d, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let img: GrayImage = ImageBuffer::from_fn(m.width() as u32, m.height() as u32, |x, y| {
        Luma([to_u8(m.get(y as usize, x as usize))])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// 16-bit min-max normalized PNG plus the `<path>.txt` sidecar.
pub fn write_map_png16(m: &Map2d, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let (lo, hi) = m.min_max();
    let span = hi - lo;
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(m.width() as u32, m.height() as u32, |x, y| {
            let v = if span > 0.0 {
                (m.get(y as usize, x as usize) - lo) / span
            } else {
                0.0
            };
            Luma([(v * 65535.0).round() as u16])
        });
    img.save(path).map_err(|e| image_err(path, e))?;
    let side = sidecar_path(path);
    std::fs::write(&side, format!("min {lo:e}\nmax {hi:e}\n")).map_err(|e| Error::io(&side, e))
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    s.into()
}

const AMAP_MAGIC: &[u8; 4] = b"AMAP";
const AMAP_VERSION: u32 = 1;

pub fn encode_map(m: &Map2d) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * m.len());
    out.extend_from_slice(AMAP_MAGIC);
    out.extend_from_slice(&AMAP_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.height() as u32).to_le_bytes());
    out.extend_from_slice(&(m.width() as u32).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_map(bytes: &[u8]) -> Result<Map2d> {
    let bad = |msg: &str| Error::param(format!("raw map: {msg}"));
    if bytes.len() < 16 || &bytes[..4] != AMAP_MAGIC {
        return Err(bad("bad magic or short header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if word(4) != AMAP_VERSION {
        return Err(bad(&format!("unsupported version {}", word(4))));
    }
    let (h, w) = (word(8) as usize, word(12) as usize);
    if bytes.len() != 16 + 8 * h * w {
        return Err(bad("size does not match header"));
    }
    let data = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Map2d::new(h, w, data)
}

pub fn write_map_raw(m: &Map2d, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, encode_map(m)).map_err(|e| Error::io(path, e))
}

pub fn read_map_raw(path: &Path) -> Result<Map2d> {
    decode_map(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Blue-to-red ramp for `v` in `[0, 1]`.
pub fn heat_color(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    [to_u8(r), to_u8(g), to_u8(b)]
}

/// Map rendered with [`heat_color`] after normalizing by `(lo, hi)`.
pub fn heatmap(m: &Map2d, (lo, hi): (f64, f64)) -> RgbImage {
    let span = hi - lo;
    ImageBuffer::from_fn(m.width() as u32, m.height() as u32, |x, y| {
        let v = if span > 0.0 {
            (m.get(y as usize, x as usize) - lo) / span
        } else {
            0.0
        };
        Rgb(heat_color(v))
    })
}

/// Panels side by side with a 2-pixel white gutter; heights must match.
pub fn hstack(panels: &[RgbImage]) -> Result<RgbImage> {
    let h = panels.first().map_or(0, |p| p.height());
    if panels.iter().any(|p| p.height() != h) {
        return Err(Error::shape("panel heights differ"));
    }
    let gap = 2;
    let w =
        panels.iter().map(|p| p.width()).sum::<u32>() + gap * panels.len().saturating_sub(1) as u32;
    let mut out = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let mut x0 = 0;
    for p in panels {
        image::imageops::replace(&mut out, p, x0 as i64, 0);
        x0 += p.width() + gap;
    }
    Ok(out)
}

/// Rows stacked vertically with a 2-pixel gutter; widths must match.
pub fn vstack(rows: &[RgbImage]) -> Result<RgbImage> {
    let w = rows.first().map_or(0, |p| p.width());
    if rows.iter().any(|p| p.width() != w) {
        return Err(Error::shape("row widths differ"));
    }
    let gap = 2;
    let h =
        rows.iter().map(|p| p.height()).sum::<u32>() + gap * rows.len().saturating_sub(1) as u32;
    let mut out = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let mut y0 = 0;
    for p in rows {
        image::imageops::replace(&mut out, p, 0, y0 as i64);
        y0 += p.height() + gap;
    }
    Ok(out)
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    img.save(path).map_err(|e| image_err(path, e))
}
