use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalization used inside the encoder layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Per-feature statistics over every patch token of the batch.
    Batch,
    /// Per-token statistics over the feature axis.
    Layer,
}

/// Shape of one channel's patch attention forecaster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecasterConfig {
    /// Lookback length `L`.
    pub lookback: usize,
    /// Forecast horizon `T`.
    pub horizon: usize,
    /// Patch length `P`.
    pub patch_len: usize,
    /// Patch stride `S`.
    pub stride: usize,
    /// Latent width `D`.
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub norm: NormKind,
    /// Not supported; any non-zero value is rejected.
    pub dropout: f64,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        Self {
            lookback: 96,
            horizon: 1,
            patch_len: 16,
            stride: 8,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            norm: NormKind::Batch,
            dropout: 0.0,
        }
    }
}

impl ForecasterConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        let positive = [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("patch_len", self.patch_len),
            ("stride", self.stride),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return bad(format!("forecaster.{name} must be positive"));
        }
        if self.patch_len > self.lookback {
            return bad(format!(
                "forecaster.patch_len ({}) exceeds lookback ({})",
                self.patch_len, self.lookback
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "forecaster.d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.dropout != 0.0 {
            return bad(format!(
                "forecaster.dropout = {} is not supported; set it to 0",
                self.dropout
            ));
        }
        Ok(())
    }

    /// Number of patch tokens `N = floor((L - P) / S) + 2`.
    pub fn n_patches(&self) -> usize {
        patch_count(self.lookback, self.patch_len, self.stride)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Tokens produced from a window of length `lookback` after padding it with
/// `stride` copies of its last value: `floor((L - P) / S) + 2`.
pub fn patch_count(lookback: usize, patch_len: usize, stride: usize) -> usize {
    (lookback - patch_len) / stride + 2
}
