//! The fusion network and its domain types.

mod blocks;
mod config;
mod mpafm;
mod network;
mod params;

pub use blocks::{InitBlock, LkcBlock, LkdcBlock};
pub use config::{
    ablation_config, AblationRow, BodyNorm, InitNorm, ModelConfig, DESK_CHANNEL_WIDTHS,
};
pub(crate) use config::fnv1a;

pub use mpafm::{bidirectional_interaction, Mpafm};
pub use network::FusionNet;
pub use params::{Forward, ParamEntry, ParamId, ParamStore};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A normalized multichannel raster: finite values in `[0,1]`,
/// channels-first `(B,C,H,W)` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    tensor: Tensor,
}

impl ImageTensor {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if !tensor.is_finite() {
            return Err(Error::RejectedInput(
                "image tensor contains non-finite values".into(),
            ));
        }
        let (lo, hi) = (tensor.min_value(), tensor.max_value());
        if lo < 0.0 || hi > 1.0 {
            return Err(Error::RejectedInput(format!(
                "image tensor values outside [0,1]: range [{lo}, {hi}]"
            )));
        }
        Ok(ImageTensor { tensor })
    }

    /// Clamp arbitrary finite data into `[0,1]` and wrap it.
    pub fn clamped(tensor: Tensor) -> Result<Self> {
        if !tensor.is_finite() {
            return Err(Error::RejectedInput(
                "image tensor contains non-finite values".into(),
            ));
        }
        Ok(ImageTensor {
            tensor: tensor.map(|v| v.clamp(0.0, 1.0)),
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn shape(&self) -> crate::tensor::Shape {
        self.tensor.shape()
    }
}

/// Where an intermediate activation came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    Encoder,
    Decoder,
}

/// Intermediate activation `(B,C,H,W)` tagged with its stage; stage `s`
/// features live at `/2^s` of the input resolution.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub data: Tensor,
    pub stage: usize,
    pub source: FeatureSource,
}

impl FeatureMap {
    pub fn new(data: Tensor, stage: usize, source: FeatureSource) -> Result<Self> {
        if !data.is_finite() {
            return Err(Error::RejectedInput(
                "feature map contains non-finite values".into(),
            ));
        }
        Ok(FeatureMap {
            data,
            stage,
            source,
        })
    }
}
