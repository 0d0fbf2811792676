//! Multipath adaptive fusion module: recalibrates an encoder feature with
//! the matching upsampled decoder feature before the skip concatenation.
//!
//! Pipeline: channel attention on the encoder path plus spatial attention on
//! the decoder path form a combined weight map; a refinement conv doubles its
//! channels and a sigmoid split yields per-path gates A and B; the gated maps
//! interact bidirectionally and a final pixel-attention conv recalibrates the
//! result. Output shape always equals the input shape.

use super::blocks::ConvLayer;
use super::params::{Forward, Init};
use crate::error::{Error, Result};
use crate::tensor::{concat_channels, Var};

pub struct Mpafm {
    ca_fc1: ConvLayer,
    ca_fc2: ConvLayer,
    sa_conv: ConvLayer,
    refine: ConvLayer,
    recal: ConvLayer,
    channels: usize,
}

/// Channel-attention bottleneck reduction factor.
const REDUCTION: usize = 4;

impl Mpafm {
    pub(crate) fn new(init: &mut Init<'_>, name: &str, channels: usize) -> Self {
        let hidden = (channels / REDUCTION).max(1);
        Mpafm {
            ca_fc1: ConvLayer::new(init, &format!("{name}.ca_fc1"), channels, hidden, 1, 1, 1, true),
            ca_fc2: ConvLayer::new(init, &format!("{name}.ca_fc2"), hidden, channels, 1, 1, 1, true),
            sa_conv: ConvLayer::new(init, &format!("{name}.sa"), 2, 1, 7, 1, 1, true),
            refine: ConvLayer::new(init, &format!("{name}.refine"), channels, 2 * channels, 3, 1, 1, true),
            recal: ConvLayer::new(init, &format!("{name}.recal"), channels, channels, 3, 1, 1, true),
            channels,
        }
    }

    /// Channel attention: average- and max-pooled descriptors through the
    /// shared bottleneck, summed. `(B,C,H,W) -> (B,C,1,1)`.
    fn channel_attention<'t>(&self, ctx: &Forward<'t, '_>, e: Var<'t>) -> Var<'t> {
        let mlp = |v: Var<'t>| self.ca_fc2.forward(ctx, self.ca_fc1.forward(ctx, v).relu());
        mlp(e.global_avg_pool()).add(mlp(e.global_max_pool()))
    }

    /// Spatial attention: channel mean/max maps through a 7x7 conv.
    /// `(B,C,H,W) -> (B,1,H,W)`.
    fn spatial_attention<'t>(&self, ctx: &Forward<'t, '_>, d: Var<'t>) -> Var<'t> {
        let stats = concat_channels(&[d.channel_mean(), d.channel_max()]);
        self.sa_conv.forward(ctx, stats)
    }

    /// Recalibrated skip feature; `e` and `d` must share `(B,C,H,W)`.
    pub fn forward<'t>(&self, ctx: &Forward<'t, '_>, e: Var<'t>, d: Var<'t>) -> Result<Var<'t>> {
        if e.shape() != d.shape() {
            return Err(Error::ShapeMismatch {
                context: "mpafm",
                expected: format!("{:?}", e.shape()),
                got: format!("{:?}", d.shape()),
            });
        }
        if e.shape()[1] != self.channels {
            return Err(Error::ContractViolation(format!(
                "mpafm expects {} channels, got {}",
                self.channels,
                e.shape()[1]
            )));
        }
        // combined weight map, broadcast over (B,C,1,1) + (B,1,H,W)
        let weight = self.channel_attention(ctx, e).add(self.spatial_attention(ctx, d));
        let gates = self.refine.forward(ctx, weight).sigmoid();
        let a = gates.slice_channels(0, self.channels);
        let b = gates.slice_channels(self.channels, self.channels);
        let e_att = a.mul(e);
        let d_att = b.mul(d);
        let fused = bidirectional_interaction(e_att, d_att);
        Ok(fused.mul(self.recal.forward(ctx, fused).sigmoid()))
    }
}

/// `sigma(e)*d + sigma(d)*e`; exactly symmetric in its two arguments.
pub fn bidirectional_interaction<'t>(e_att: Var<'t>, d_att: Var<'t>) -> Var<'t> {
    e_att.sigmoid().mul(d_att).add(d_att.sigmoid().mul(e_att))
}
