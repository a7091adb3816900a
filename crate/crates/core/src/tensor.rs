//! Dense channel-major feature tensors and binary masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A real C×H×W tensor stored channel-major, then row-major.
///
/// Images share this layout (3×H×W, values in [0,1]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

pub type Image = FeatureMap;

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "buffer of length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "empty feature map");
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut out = Self::zeros(channels, height, width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    out.data[(c * height + y) * width + x] = f(c, y, x);
                }
            }
        }
        out
    }

    /// Builds a map from a buffer known to have the right length. Panics otherwise.
    pub(crate) fn from_raw(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
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

    /// Number of spatial positions, H·W.
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Feature vector at spatial index `pos` (row-major).
    pub fn column(&self, pos: usize) -> Vec<f64> {
        let n = self.plane_len();
        (0..self.channels).map(|c| self.data[c * n + pos]).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::from_raw(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|v| v * s).collect(),
        )
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.shape() == other.shape()
    }

    /// Per-channel spatial mean, accumulated in f64.
    pub fn channel_means(&self) -> Vec<f64> {
        (0..self.channels)
            .map(|c| self.plane(c).iter().sum::<f64>() / self.plane_len() as f64)
            .collect()
    }
}

/// An H×W mask with entries in {0,1}.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "mask dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask buffer of length {} does not match {height}x{width}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|&v| v > 1) {
            return Err(Error::InvalidMask {
                index,
                value: data[index],
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        Self {
            height,
            width,
            data,
        }
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

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.count_ones() as f64 / self.data.len() as f64
    }

    pub fn inverted(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// Downsamples by an integer factor: a cell is foreground when the mean of
    /// its block is at least one half.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Shape(format!(
                "cannot downsample {}x{} mask by {factor}",
                self.height, self.width
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let block = factor * factor;
        Ok(Self::from_fn(h, w, |y, x| {
            let mut sum = 0usize;
            for dy in 0..factor {
                let row = (y * factor + dy) * self.width + x * factor;
                sum += self.data[row..row + factor]
                    .iter()
                    .map(|&v| v as usize)
                    .sum::<usize>();
            }
            2 * sum >= block
        }))
    }

    /// Downsamples to the given resolution; the source dims must be integer multiples.
    pub fn resize_to(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || self.height % height != 0 || self.width != width * (self.height / height)
        {
            return Err(Error::Shape(format!(
                "cannot map {}x{} mask onto {height}x{width}",
                self.height, self.width
            )));
        }
        self.downsample(self.height / height)
    }
}

/// Bilinear upsampling of an H×W map to (H·factor)×(W·factor), sampling at
/// pixel centres with edge clamping.
pub fn upsample_bilinear(src: &[f64], height: usize, width: usize, factor: usize) -> Vec<f64> {
    let (oh, ow) = (height * factor, width * factor);
    let mut out = vec![0.0; oh * ow];
    let coord = |o: usize, n: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, height);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, width);
            let top = src[y0 * width + x0] * (1.0 - fx) + src[y0 * width + x1] * fx;
            let bottom = src[y1 * width + x0] * (1.0 - fx) + src[y1 * width + x1] * fx;
            out[y * ow + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}
