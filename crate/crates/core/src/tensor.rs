//! Image and single-channel map containers.
//!
//! Images are stored channel-major (`c, y, x`) in the model range `[-1, 1]`.
//! Storage range `[0, 1]` is only used at the file boundary.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "image dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::param(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        assert!(channels > 0 && height > 0 && width > 0);
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        assert!(channels > 0 && height > 0 && width > 0);
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    /// Convert from storage range `[0, 1]`.
    pub fn from_storage(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        Self::new(
            channels,
            height,
            width,
            data.into_iter().map(|v| v * 2.0 - 1.0).collect(),
        )
    }

    /// Values mapped to storage range `[0, 1]`, clamped.
    pub fn to_storage(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
            .collect()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn check_same_shape(&self, other: &ImageTensor, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            channels: self.channels,
            height: self.height,
            width: self.width,
        }
    }

    /// Elementwise combination of two equally shaped images.
    pub fn zip_map(&self, other: &ImageTensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other, "zip_map")?;
        Ok(Self {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            channels: self.channels,
            height: self.height,
            width: self.width,
        })
    }

    pub fn clamp_model_range(&self) -> Self {
        self.map(|v| v.clamp(-1.0, 1.0))
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Mean absolute difference over pixels where `mask > 0.5`, averaged over channels.
    /// Returns `None` when the mask selects nothing.
    pub fn masked_mean_abs_diff(&self, other: &ImageTensor, mask: &Map2d) -> Result<Option<f64>> {
        self.check_same_shape(other, "masked_mean_abs_diff")?;
        if mask.height() != self.height || mask.width() != self.width {
            return Err(Error::shape("mask resolution differs from image"));
        }
        let plane = self.height * self.width;
        let mut sum = 0.0;
        let mut count = 0usize;
        for (p, &m) in mask.data().iter().enumerate() {
            if m > 0.5 {
                for c in 0..self.channels {
                    sum += (self.data[c * plane + p] - other.data[c * plane + p]).abs();
                }
                count += self.channels;
            }
        }
        Ok((count > 0).then(|| sum / count as f64))
    }

    /// Per-pixel mean over channels.
    pub fn channel_mean(&self) -> Map2d {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(&self.data[c * plane..(c + 1) * plane]) {
                *o += v;
            }
        }
        let n = self.channels as f64;
        out.iter_mut().for_each(|v| *v /= n);
        Map2d::new(self.height, self.width, out).expect("shape is consistent")
    }
}

/// A real-valued single-channel map (masks, anomaly maps), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Map2d {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Map2d {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("map dimensions must be positive"));
        }
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{} values for a {height}x{width} map",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        assert!(height > 0 && width > 0);
        Self {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::new(height, width, data).expect("positive dimensions")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Fraction of entries above 0.5.
    pub fn coverage(&self) -> f64 {
        self.data.iter().filter(|&&v| v > 0.5).count() as f64 / self.data.len() as f64
    }

    /// Rotate 90 degrees clockwise.
    pub fn rot90(&self) -> Self {
        let (h, w) = (self.height, self.width);
        Map2d::from_fn(w, h, |y, x| self.get(h - 1 - x, y))
    }
}
