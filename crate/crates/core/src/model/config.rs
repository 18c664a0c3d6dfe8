//! Model hyperparameters and derived patch geometry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which attention projections carry low-rank adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptTargets {
    pub q: bool,
    pub k: bool,
    pub v: bool,
    pub o: bool,
}

impl AdaptTargets {
    pub const ALL: AdaptTargets = AdaptTargets {
        q: true,
        k: true,
        v: true,
        o: true,
    };

    pub const QV: AdaptTargets = AdaptTargets {
        q: true,
        k: false,
        v: true,
        o: false,
    };

    pub fn as_array(&self) -> [bool; 4] {
        [self.q, self.k, self.v, self.o]
    }
}

impl Default for AdaptTargets {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Look-back window L.
    pub lookback: usize,
    /// Forecast horizon T.
    pub horizon: usize,
    /// Number of channels M (one RevIN affine pair per channel).
    pub channels: usize,
    pub patch_len: usize,
    pub patch_stride: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub adapt: AdaptTargets,
    pub quant_block: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lookback: 336,
            horizon: 96,
            channels: 7,
            patch_len: 16,
            patch_stride: 8,
            d_model: 128,
            heads: 8,
            layers: 3,
            ffn_dim: 256,
            lora_rank: 8,
            lora_alpha: 16.0,
            adapt: AdaptTargets::ALL,
            quant_block: 64,
            init_std: 0.02,
        }
    }
}

/// Patch geometry derived from a [`ModelConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchConfig {
    pub patch_len: usize,
    pub stride: usize,
    pub lookback: usize,
    /// Number of patches N, including the end patch when the stride does not
    /// tile the window exactly.
    pub n_patches: usize,
}

impl PatchConfig {
    pub fn new(lookback: usize, patch_len: usize, stride: usize) -> Result<Self> {
        if patch_len == 0 || stride == 0 {
            return Err(Error::config("patch_len", "patch length and stride must be positive"));
        }
        if patch_len > lookback {
            return Err(Error::config(
                "patch_len",
                format!("patch length {patch_len} exceeds look-back {lookback}"),
            ));
        }
        let span = lookback - patch_len;
        let tail = usize::from(!span.is_multiple_of(stride));
        Ok(Self {
            patch_len,
            stride,
            lookback,
            n_patches: span / stride + 1 + tail,
        })
    }

    /// Start offset of patch `k`; the optional end patch is anchored at `L − P`.
    pub fn patch_start(&self, k: usize) -> usize {
        (k * self.stride).min(self.lookback - self.patch_len)
    }
}

impl ModelConfig {
    pub fn patch(&self) -> Result<PatchConfig> {
        PatchConfig::new(self.lookback, self.patch_len, self.patch_stride)
    }

    pub fn n_patches(&self) -> usize {
        self.patch().map_or(0, |p| p.n_patches)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("channels", self.channels),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("layers", self.layers),
            ("ffn_dim", self.ffn_dim),
            ("quant_block", self.quant_block),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{key}"), "must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(
                "model.heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.heads),
            ));
        }
        if self.lora_rank == 0 || self.lora_rank > self.d_model {
            return Err(Error::config(
                "model.lora_rank",
                format!("rank {} must lie in 1..={}", self.lora_rank, self.d_model),
            ));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::config("model.init_std", "must be finite and non-negative"));
        }
        self.patch().map(|_| ()).map_err(|e| match e {
            Error::Config { message, .. } => Error::config("model.patch_len", message),
            other => other,
        })
    }
}
