//! Blockwise absmax int8 quantization for frozen base weights.
//!
//! Each block of `block_size` consecutive row-major elements stores one f32
//! scale (the block's absolute maximum) and int8 codes
//! `round(127·w/absmax)`. Dequantization is `code·absmax/127`.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_BLOCK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    block_size: usize,
    codes: Vec<i8>,
    scales: Vec<f32>,
}

impl QuantizedTensor {
    pub fn quantize(w: &Tensor, block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::config("quant_block", "block size must be positive"));
        }
        let mut codes = Vec::with_capacity(w.len());
        let mut scales = Vec::with_capacity(w.len().div_ceil(block_size));
        for block in w.data().chunks(block_size) {
            let absmax = block.iter().fold(0.0f64, |m, v| m.max(v.abs())) as f32;
            scales.push(absmax);
            let s = f64::from(absmax);
            for &v in block {
                let code = if s > 0.0 { (127.0 * v / s).round().clamp(-127.0, 127.0) } else { 0.0 };
                codes.push(code as i8);
            }
        }
        Ok(Self {
            shape: w.shape().to_vec(),
            block_size,
            codes,
            scales,
        })
    }

    /// Reassembles a quantized tensor from stored parts (checkpoint loading).
    pub fn from_parts(shape: Vec<usize>, block_size: usize, codes: Vec<i8>, scales: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if block_size == 0 || codes.len() != n || scales.len() != n.div_ceil(block_size) {
            return Err(Error::Checkpoint(format!(
                "quantized tensor {shape:?}: {} codes, {} scales, block {block_size}",
                codes.len(),
                scales.len()
            )));
        }
        if scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Checkpoint("invalid quantization scale".into()));
        }
        Ok(Self {
            shape,
            block_size,
            codes,
            scales,
        })
    }

    pub fn dequantize(&self) -> Tensor {
        let data = self
            .codes
            .iter()
            .enumerate()
            .map(|(i, &c)| f64::from(c) * f64::from(self.scales[i / self.block_size]) / 127.0)
            .collect();
        Tensor::from_parts(self.shape.clone(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    /// Serialized size: one byte per code plus four per scale.
    pub fn byte_len(&self) -> usize {
        self.codes.len() + 4 * self.scales.len()
    }
}
