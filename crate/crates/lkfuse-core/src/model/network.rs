//! The full fusion network: initial block, four encoder stages with
//! downsampling between them, four decoder stages with recalibrated skip
//! connections, and a sigmoid output head.
//!
//! Resolution layout: encoder stage `s` runs at `/2^s`; a fourth downsample
//! after the last stage takes the feature to `/16` (hence the
//! divisible-by-16 input contract), and each decoder stage starts with a x2
//! upsample back toward full resolution.

use super::blocks::{fuse_conv, ConvLayer, Downsample, InitBlock, LkcBlock, LkdcBlock, Upsample};
use super::config::ModelConfig;
use super::mpafm::Mpafm;
use super::params::{Forward, Init, ParamStore};
use super::{FeatureMap, FeatureSource, ImageTensor};
use crate::error::{Error, Result};
use crate::tensor::{concat_channels, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

struct EncoderStage {
    lkc: LkcBlock,
    lkdc: Option<LkdcBlock>,
}

struct DecoderStage {
    up: Upsample,
    mpafm: Option<Mpafm>,
    fuse: ConvLayer,
    lkc: LkcBlock,
}

pub struct FusionNet {
    cfg: ModelConfig,
    store: ParamStore,
    init_block: InitBlock,
    encoder: Vec<EncoderStage>,
    down: Vec<Downsample>,
    decoder: Vec<DecoderStage>, // index s = stage (resolution /2^s)
    head: ConvLayer,
}

impl FusionNet {
    /// Build a network with freshly initialized parameters.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let w = cfg.channel_widths;
        let k = cfg.kernel_schedule;

        let init_block = InitBlock::new(&mut init, cfg);
        let mut encoder = Vec::new();
        for s in 0..4 {
            encoder.push(EncoderStage {
                lkc: LkcBlock::new(&mut init, &format!("enc{s}.lkc"), cfg, w[s], k[s]),
                lkdc: cfg
                    .use_lkdc
                    .then(|| LkdcBlock::new(&mut init, &format!("enc{s}.lkdc"), cfg, w[s], k[s])),
            });
        }
        let mut down = Vec::new();
        for s in 0..4 {
            let c_out = if s == 3 { w[3] } else { w[s + 1] };
            down.push(Downsample::new(&mut init, &format!("down{s}"), w[s], c_out));
        }
        let mut decoder = Vec::new();
        for s in 0..4 {
            let c_in = if s == 3 { w[3] } else { w[s + 1] };
            decoder.push(DecoderStage {
                up: Upsample::new(&mut init, &format!("dec{s}.up"), c_in, w[s]),
                mpafm: cfg
                    .use_mpafm
                    .then(|| Mpafm::new(&mut init, &format!("dec{s}.mpafm"), w[s])),
                fuse: fuse_conv(&mut init, &format!("dec{s}.fuse"), w[s]),
                lkc: LkcBlock::new(&mut init, &format!("dec{s}.lkc"), cfg, w[s], k[s]),
            });
        }
        // reduced-scale head keeps the output sigmoid unsaturated at the
        // start of training
        let head =
            ConvLayer::with_weight_scale(&mut init, "head.conv", w[0], 1, 1, 1, 1, true, 0.125);
        Ok(FusionNet {
            cfg: cfg.clone(),
            store,
            init_block,
            encoder,
            down,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Validate the `(B,2,H,W)` input contract for a forward pass.
    pub fn check_input(&self, shape: crate::tensor::Shape) -> Result<()> {
        let [_, c, h, w] = shape;
        if c != 2 {
            return Err(Error::ContractViolation(format!(
                "model input must splice exactly 2 source channels, got {c}"
            )));
        }
        if h % 16 != 0 || w % 16 != 0 {
            let pad_h = h.div_ceil(16) * 16 - h;
            let pad_w = w.div_ceil(16) * 16 - w;
            return Err(Error::RejectedInput(format!(
                "spatial dims {h}x{w} must be divisible by 16 (4 downsampling stages); \
                 pad by {pad_h} rows and {pad_w} cols, e.g. with pad_for_inference"
            )));
        }
        let min = self.cfg.min_input_dim();
        if h < min || w < min {
            return Err(Error::RejectedInput(format!(
                "spatial dims {h}x{w} below the minimum {min}x{min} for kernel schedule {:?}",
                self.cfg.kernel_schedule
            )));
        }
        Ok(())
    }

    /// Graph-building forward pass on an existing context. Input must satisfy
    /// [`FusionNet::check_input`]; output is `(B,1,H,W)` after a sigmoid.
    pub fn forward_on<'t>(&self, ctx: &Forward<'t, '_>, pair: Var<'t>) -> Result<Var<'t>> {
        self.check_input(pair.shape())?;
        let x0 = self.init_block.forward(ctx, pair)?;

        let mut skips: Vec<Var<'t>> = Vec::with_capacity(4);
        let mut cur = x0;
        for s in 0..4 {
            let stage = &self.encoder[s];
            let mut e = stage.lkc.forward(ctx, cur)?;
            if let Some(lkdc) = &stage.lkdc {
                e = lkdc.forward(ctx, e)?;
            }
            skips.push(e);
            cur = self.down[s].forward(ctx, e);
        }

        for s in (0..4).rev() {
            let stage = &self.decoder[s];
            let up = stage.up.forward(ctx, cur);
            let skip = match &stage.mpafm {
                Some(m) => m.forward(ctx, skips[s], up)?,
                None => skips[s],
            };
            let merged = stage.fuse.forward(ctx, concat_channels(&[up, skip]));
            cur = stage.lkc.forward(ctx, merged)?;
        }

        Ok(self.head.forward(ctx, cur).sigmoid())
    }

    /// Inference: fuse a spliced pair into a single-channel image.
    pub fn forward(&self, pair: &ImageTensor) -> Result<ImageTensor> {
        let tape = Tape::new();
        let ctx = Forward::inference(&tape, &self.store);
        let out = self.forward_on(&ctx, tape.leaf(pair.tensor().clone()))?;
        ImageTensor::new(out.value())
    }

    /// Initial-block activation for feature-map analysis.
    pub fn init_feature_map(&self, pair: &ImageTensor) -> Result<FeatureMap> {
        self.check_input(pair.tensor().shape())?;
        let tape = Tape::new();
        let ctx = Forward::inference(&tape, &self.store);
        let out = self
            .init_block
            .forward(&ctx, tape.leaf(pair.tensor().clone()))?;
        FeatureMap::new(out.value(), 0, FeatureSource::Encoder)
    }

    /// Encoder stage outputs e0..e3 for analysis.
    pub fn encoder_features(&self, pair: &ImageTensor) -> Result<Vec<FeatureMap>> {
        self.check_input(pair.tensor().shape())?;
        let tape = Tape::new();
        let ctx = Forward::inference(&tape, &self.store);
        let x0 = self
            .init_block
            .forward(&ctx, tape.leaf(pair.tensor().clone()))?;
        let mut maps = Vec::with_capacity(4);
        let mut cur = x0;
        for s in 0..4 {
            let stage = &self.encoder[s];
            let mut e = stage.lkc.forward(&ctx, cur)?;
            if let Some(lkdc) = &stage.lkdc {
                e = lkdc.forward(&ctx, e)?;
            }
            maps.push(FeatureMap::new(e.value(), s, FeatureSource::Encoder)?);
            cur = self.down[s].forward(&ctx, e);
        }
        Ok(maps)
    }

    /// Zero every parameter whose name contains `needle` (test support for
    /// residual-identity checks).
    pub fn zero_params_containing(&mut self, needle: &str) {
        let ids: Vec<_> = self
            .store
            .iter()
            .filter(|(_, e)| e.name.contains(needle))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let shape = self.store.get(id).shape();
            self.store.set(id, Tensor::zeros(shape));
        }
    }
}
