//! Dense feature maps and the reference convolution arithmetic.
//!
//! Tensors are stored channel-major: all of channel 0 row by row, then
//! channel 1, and so on. Convolutions are stride 1 with zero padding so the
//! spatial size is preserved through a head tower.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// A `C × H × W` feature map of 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl DenseTensor {
    /// Builds a tensor, checking the value count and that every value is finite.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let expected = channels
            .checked_mul(height)
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::validation("tensor shape overflows"))?;
        if data.len() != expected {
            return Err(Error::validation(format!(
                "tensor [{channels}, {height}, {width}] needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!("non-finite tensor value at index {i}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Wraps values without the finiteness scan. Callers guarantee the length.
    pub(crate) fn from_raw(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
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

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    /// The `C`-vector at spatial position `(x, y)`.
    pub fn pixel(&self, x: usize, y: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.get(c, y, x)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> DenseTensor {
        DenseTensor::from_raw(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }
}

/// Weights of a single convolution, laid out `[out][in][ky][kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights {
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl ConvWeights {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if kernel != 1 && kernel != 3 {
            return Err(Error::config(format!(
                "unsupported kernel size {kernel}, expected 1 or 3"
            )));
        }
        let expected = out_channels
            .checked_mul(in_channels)
            .and_then(|n| n.checked_mul(kernel * kernel))
            .ok_or_else(|| Error::config("conv weight shape overflows"))?;
        if weights.len() != expected {
            return Err(Error::config(format!(
                "conv [{out_channels}, {in_channels}, {kernel}, {kernel}] needs {expected} weights, got {}",
                weights.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::config(format!(
                "conv with {out_channels} outputs needs {out_channels} biases, got {}",
                bias.len()
            )));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel,
            weights,
            bias,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kernel: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            kernel,
            weights: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f32] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f32] {
        &mut self.bias
    }

    pub fn index(&self, o: usize, c: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + c) * self.kernel + ky) * self.kernel + kx
    }

    pub fn get(&self, o: usize, c: usize, ky: usize, kx: usize) -> f32 {
        self.weights[self.index(o, c, ky, kx)]
    }

    pub fn set(&mut self, o: usize, c: usize, ky: usize, kx: usize, v: f32) {
        let i = self.index(o, c, ky, kx);
        self.weights[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Stride-1, zero-padded convolution.
///
/// Every output value starts from its bias and accumulates input channels in
/// order, then kernel rows, then kernel columns. The order is the same no
/// matter how output channels are spread over threads.
pub fn conv2d(input: &DenseTensor, w: &ConvWeights) -> Result<DenseTensor> {
    if input.channels != w.in_channels {
        return Err(Error::config(format!(
            "conv expects {} input channels, tensor has {}",
            w.in_channels, input.channels
        )));
    }
    if !input.is_finite() {
        return Err(Error::validation("conv input contains non-finite values"));
    }
    let (h, wd) = (input.height, input.width);
    let plane = h * wd;
    let mut out = vec![0.0f32; w.out_channels * plane];
    if plane == 0 {
        return Ok(DenseTensor::from_raw(w.out_channels, h, wd, out));
    }
    out.par_chunks_mut(plane)
        .enumerate()
        .for_each(|(o, dst)| conv_plane(input, w, o, dst));
    Ok(DenseTensor::from_raw(w.out_channels, h, wd, out))
}

fn conv_plane(input: &DenseTensor, w: &ConvWeights, o: usize, dst: &mut [f32]) {
    let (h, wd) = (input.height as isize, input.width as isize);
    let k = w.kernel as isize;
    let r = (k - 1) / 2;
    dst.fill(w.bias[o]);
    for c in 0..w.in_channels {
        let src = input.plane(c);
        for ky in 0..k {
            let dy = ky - r;
            let y0 = (-dy).max(0);
            let y1 = (h - dy).min(h);
            for kx in 0..k {
                let dx = kx - r;
                let x0 = (-dx).max(0);
                let x1 = (wd - dx).min(wd);
                if x1 <= x0 {
                    continue;
                }
                let wv = w.get(o, c, ky as usize, kx as usize);
                for y in y0..y1 {
                    let d0 = (y * wd + x0) as usize;
                    let s0 = ((y + dy) * wd + x0 + dx) as usize;
                    let n = (x1 - x0) as usize;
                    let drow = &mut dst[d0..d0 + n];
                    let srow = &src[s0..s0 + n];
                    for (d, s) in drow.iter_mut().zip(srow) {
                        *d += wv * s;
                    }
                }
            }
        }
    }
}

pub fn relu(input: &DenseTensor) -> DenseTensor {
    input.map(|v| v.max(0.0))
}

pub fn sigmoid_scalar(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn sigmoid(input: &DenseTensor) -> DenseTensor {
    input.map(sigmoid_scalar)
}

/// Normwise relative error `max|a - b| / max|b|`.
///
/// Elementwise relative error is meaningless where the reference crosses
/// zero, so the reference's largest magnitude is the scale. Returns
/// infinity on a length mismatch.
pub fn max_relative_error(actual: &[f32], reference: &[f32]) -> f64 {
    if actual.len() != reference.len() {
        return f64::INFINITY;
    }
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (&a, &b) in actual.iter().zip(reference) {
        diff = diff.max((a as f64 - b as f64).abs());
        scale = scale.max((b as f64).abs());
    }
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(f64::MIN_POSITIVE)
    }
}
