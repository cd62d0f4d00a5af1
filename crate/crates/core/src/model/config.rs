use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::KernelKind;
use crate::numerics::conv_output_extent;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Performer layers over the compact associative memory.
    Mvp,
    /// Exact causal attention over the stored history.
    Mvt,
    /// One LSTM cell per layer in place of attention.
    Lstm,
    /// A dense layer on the current frame's embedding; no history.
    SingleView,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Mvp, Variant::Mvt, Variant::Lstm, Variant::SingleView];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mvp => "mvp",
            Variant::Mvt => "mvt",
            Variant::Lstm => "lstm",
            Variant::SingleView => "single_view",
        }
    }

    pub fn has_history(self) -> bool {
        self != Variant::SingleView
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

pub const TRAIN_VIEW_CHOICES: [usize; 3] = [3, 6, 12];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub resolution: usize,
    /// Embedding width `d`.
    pub latent_dim: usize,
    pub qk_dim: usize,
    /// Random features `m` (mvp with the softmax kernel).
    pub feature_count: usize,
    pub kernel: KernelKind,
    pub orthogonal_features: bool,
    pub layers: usize,
    pub ff_dim: usize,
    /// Output channels of each stride-2 encoder stage.
    pub conv_channels: Vec<usize>,
    pub conv_kernel: usize,
    pub share_towers: bool,
    pub positional_encoding: bool,
    /// Frames of each training sequence used by `train`.
    pub train_views: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Mvp,
            resolution: 16,
            latent_dim: 128,
            qk_dim: 32,
            feature_count: 64,
            kernel: KernelKind::Softmax,
            orthogonal_features: true,
            layers: 2,
            ff_dim: 128,
            conv_channels: vec![8, 16, 32],
            conv_kernel: 3,
            share_towers: false,
            positional_encoding: true,
            train_views: 12,
            seed: 0,
        }
    }
}

pub(crate) const STRIDE: usize = 2;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.resolution == 0 || self.latent_dim == 0 || self.ff_dim == 0 {
            return bad("resolution, latent_dim and ff_dim must be positive".into());
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return bad(format!("invalid channel schedule {:?}", self.conv_channels));
        }
        if self.conv_kernel == 0 || self.conv_kernel.is_multiple_of(2) {
            return bad(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        self.encoder_extents()?;
        if !TRAIN_VIEW_CHOICES.contains(&self.train_views) {
            return bad(format!("train_views must be one of {TRAIN_VIEW_CHOICES:?}, got {}", self.train_views));
        }
        if matches!(self.variant, Variant::Mvp | Variant::Mvt | Variant::Lstm) && self.layers == 0 {
            return bad(format!("{} needs at least one layer", self.variant));
        }
        if matches!(self.variant, Variant::Mvp | Variant::Mvt) && self.qk_dim == 0 {
            return bad("qk_dim must be positive".into());
        }
        if self.variant == Variant::Mvp && self.kernel == KernelKind::Softmax && self.feature_count == 0 {
            return bad("feature_count must be positive for the softmax kernel".into());
        }
        Ok(())
    }

    /// Spatial extent after each encoder stage, starting with the input.
    pub fn encoder_extents(&self) -> Result<Vec<usize>> {
        let mut out = vec![self.resolution];
        let pad = self.conv_kernel / 2;
        for _ in &self.conv_channels {
            let d = *out.last().expect("non-empty");
            let next = conv_output_extent(d, self.conv_kernel, STRIDE, pad).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "channel schedule {:?} too deep for resolution {}",
                    self.conv_channels, self.resolution
                ))
            })?;
            out.push(next);
        }
        Ok(out)
    }

    /// Width of the flattened last encoder stage.
    pub fn bottleneck(&self) -> Result<usize> {
        let e = self.encoder_extents()?;
        let s = *e.last().expect("non-empty");
        Ok(self.conv_channels.last().expect("non-empty") * s * s * s)
    }
}
