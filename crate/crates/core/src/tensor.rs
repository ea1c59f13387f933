//! Rank-3 feature maps.
//!
//! Values live in memory as `f64`; every persisted or transmitted tensor is
//! narrowed to little-endian `f32` (see [`FeatureMap::encode_f32`]).

use crate::error::{shape_err, Error, Result};

/// Why a tensor encoding could not be decoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorFault {
    Truncated,
    Rank(u8),
    Oversize,
}

/// Dense `channels x height x width` tensor, row-major in `(c, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(shape_err(format!(
                "{} values for a {channels}x{height}x{width} map",
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
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

    pub fn plane(&self) -> usize {
        self.height * self.width
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

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(shape_err(format!("{what}: {:?} vs {:?}", self.shape(), other.shape())))
        }
    }

    /// Channels `[start, end)` as a new map.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.channels {
            return Err(shape_err(format!("channel range {start}..{end} of {}", self.channels)));
        }
        let p = self.plane();
        Self::from_vec(end - start, self.height, self.width, self.data[start * p..end * p].to_vec())
    }

    /// Stack maps with equal spatial size along the channel axis.
    pub fn concat_channels(maps: &[FeatureMap]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| shape_err("concat of zero maps"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(maps.iter().map(|m| m.len()).sum());
        let mut channels = 0;
        for m in maps {
            if (m.height, m.width) != (h, w) {
                return Err(shape_err("concat of maps with different spatial size"));
            }
            channels += m.channels;
            data.extend_from_slice(&m.data);
        }
        Self::from_vec(channels, h, w, data)
    }

    /// Values narrowed to `f32`, as they appear on disk and on the wire.
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub fn from_f32(channels: usize, height: usize, width: usize, values: &[f32]) -> Result<Self> {
        Self::from_vec(channels, height, width, values.iter().map(|&v| v as f64).collect())
    }

    /// Tensor encoding shared by the wire protocol and the dataset cache:
    /// `ndims: u8 (=3)`, dims as `u32` LE, then values as `f32` LE.
    pub fn encode_f32(&self, out: &mut Vec<u8>) {
        out.push(3);
        for d in [self.channels, self.height, self.width] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }

    /// Inverse of [`encode_f32`](Self::encode_f32). Returns the tensor and the
    /// number of bytes consumed. Tensors with more than `max_values` entries
    /// are refused before any allocation.
    pub fn decode_f32(bytes: &[u8], max_values: usize) -> std::result::Result<(Self, usize), TensorFault> {
        let ndims = *bytes.first().ok_or(TensorFault::Truncated)?;
        if ndims != 3 {
            return Err(TensorFault::Rank(ndims));
        }
        if bytes.len() < 13 {
            return Err(TensorFault::Truncated);
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[1 + 4 * i..5 + 4 * i].try_into().unwrap()) as usize;
        let (c, h, w) = (dim(0), dim(1), dim(2));
        let count = c.checked_mul(h).and_then(|v| v.checked_mul(w)).ok_or(TensorFault::Oversize)?;
        if count > max_values {
            return Err(TensorFault::Oversize);
        }
        let end = 13 + 4 * count;
        if bytes.len() < end {
            return Err(TensorFault::Truncated);
        }
        let data = bytes[13..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Ok((Self { channels: c, height: h, width: w, data }, end))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl std::ops::Index<usize> for FeatureMap {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

/// Mean squared difference between two equally shaped maps.
pub fn mse(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    a.ensure_shape(b, "mse")?;
    if a.is_empty() {
        return Err(Error::InvalidArgument("mse of empty maps".into()));
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Population mean and standard deviation of a slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
