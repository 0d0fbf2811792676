//! Building blocks: normalization layers, the large-kernel initial block,
//! the residual large-kernel block, its depthwise companion, and the
//! resolution-changing layers.

use super::config::{BodyNorm, InitNorm, ModelConfig};
use super::params::{contract, Forward, Init, ParamId};
use crate::error::{Error, Result};
use crate::tensor::{Conv2dSpec, NormDomain, Tensor, Var};

pub(crate) const NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
/// Initial scale of each residual branch's final conv.
const RESIDUAL_BRANCH_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum NormKind {
    Instance,
    Group(usize),
    Batch,
    None,
}

/// Normalization with learned scale/shift. Batch mode keeps running
/// statistics: batch statistics during training (queued as buffer updates),
/// running statistics at inference.
pub(crate) struct NormLayer {
    kind: NormKind,
    channels: usize,
    gamma: Option<ParamId>,
    beta: Option<ParamId>,
    running_mean: Option<ParamId>,
    running_var: Option<ParamId>,
}

impl NormLayer {
    pub fn new(init: &mut Init<'_>, name: &str, kind: NormKind, channels: usize) -> Self {
        if kind == NormKind::None {
            return NormLayer {
                kind,
                channels,
                gamma: None,
                beta: None,
                running_mean: None,
                running_var: None,
            };
        }
        let gamma = Some(init.ones(format!("{name}.gamma"), [1, channels, 1, 1], true));
        let beta = Some(init.zeros(format!("{name}.beta"), [1, channels, 1, 1], true));
        let (running_mean, running_var) = if kind == NormKind::Batch {
            (
                Some(init.zeros(format!("{name}.running_mean"), [1, channels, 1, 1], false)),
                Some(init.ones(format!("{name}.running_var"), [1, channels, 1, 1], false)),
            )
        } else {
            (None, None)
        };
        NormLayer {
            kind,
            channels,
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    fn affine<'t>(&self, ctx: &Forward<'t, '_>, x: Var<'t>) -> Var<'t> {
        match (self.gamma, self.beta) {
            (Some(g), Some(b)) => x.mul(ctx.param(g)).add(ctx.param(b)),
            _ => x,
        }
    }

    pub fn forward<'t>(&self, ctx: &Forward<'t, '_>, x: Var<'t>) -> Var<'t> {
        debug_assert_eq!(x.shape()[1], self.channels);
        match self.kind {
            NormKind::None => x,
            NormKind::Instance => self.affine(ctx, x.normalize(NormDomain::PerInstance, NORM_EPS)),
            NormKind::Group(groups) => {
                self.affine(ctx, x.normalize(NormDomain::PerGroup(groups), NORM_EPS))
            }
            NormKind::Batch => {
                if ctx.is_training() {
                    self.queue_running_update(ctx, &x.value());
                    self.affine(ctx, x.normalize(NormDomain::PerChannelBatch, NORM_EPS))
                } else {
                    let mean = ctx.param_value(self.running_mean.unwrap());
                    let var = ctx.param_value(self.running_var.unwrap());
                    let inv_std = var.map(|v| 1.0 / (v + NORM_EPS).sqrt());
                    let centered = x.sub(ctx.tape.leaf(mean));
                    self.affine(ctx, centered.mul(ctx.tape.leaf(inv_std)))
                }
            }
        }
    }

    /// Exponential moving average of per-channel batch statistics
    /// (biased mean, unbiased variance).
    fn queue_running_update(&self, ctx: &Forward<'_, '_>, x: &Tensor) {
        let [b, c, h, w] = x.shape();
        let n = (b * h * w) as f64;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for bi in 0..b {
            for ci in 0..c {
                for p in 0..h * w {
                    mean[ci] += x.data()[(bi * c + ci) * h * w + p];
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for bi in 0..b {
            for ci in 0..c {
                for p in 0..h * w {
                    let d = x.data()[(bi * c + ci) * h * w + p] - mean[ci];
                    var[ci] += d * d;
                }
            }
        }
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        var.iter_mut().for_each(|v| *v = *v / n * unbias);

        let rm_id = self.running_mean.unwrap();
        let rv_id = self.running_var.unwrap();
        let old_m = ctx.param_value(rm_id);
        let old_v = ctx.param_value(rv_id);
        let new_m = Tensor::from_fn([1, c, 1, 1], |i| {
            (1.0 - BN_MOMENTUM) * old_m.data()[i] + BN_MOMENTUM * mean[i]
        });
        let new_v = Tensor::from_fn([1, c, 1, 1], |i| {
            (1.0 - BN_MOMENTUM) * old_v.data()[i] + BN_MOMENTUM * var[i]
        });
        ctx.queue_buffer_update(rm_id, new_m);
        ctx.queue_buffer_update(rv_id, new_v);
    }
}

/// Plain conv layer wrapper holding ids and geometry.
pub(crate) struct ConvLayer {
    weight: ParamId,
    bias: Option<ParamId>,
    spec: Conv2dSpec,
    pub kernel: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        with_bias: bool,
    ) -> Self {
        Self::with_weight_scale(
            init, name, c_in, c_out, kernel, stride, groups, with_bias, 1.0,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_weight_scale(
        init: &mut Init<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        with_bias: bool,
        weight_scale: f64,
    ) -> Self {
        let weight = init.conv_weight_scaled(
            format!("{name}.weight"),
            c_out,
            c_in / groups,
            kernel,
            weight_scale,
        );
        let bias = with_bias.then(|| init.zeros(format!("{name}.bias"), [1, c_out, 1, 1], true));
        ConvLayer {
            weight,
            bias,
            spec: Conv2dSpec {
                stride,
                padding: kernel / 2,
                groups,
            },
            kernel,
        }
    }

    pub fn forward<'t>(&self, ctx: &Forward<'t, '_>, x: Var<'t>) -> Var<'t> {
        x.conv2d(
            ctx.param(self.weight),
            self.bias.map(|b| ctx.param(b)),
            self.spec,
        )
    }
}

fn body_norm_kind(cfg: &ModelConfig, channels: usize) -> NormKind {
    match cfg.body_norm {
        BodyNorm::Group => NormKind::Group(cfg.gn_groups_body.min(channels)),
        BodyNorm::Batch => NormKind::Batch,
        BodyNorm::None => NormKind::None,
    }
}

fn check_spatial(x: &Var<'_>, kernel: usize, what: &'static str) -> Result<()> {
    let [_, _, h, w] = x.shape();
    if h < kernel || w < kernel {
        return Err(Error::RejectedInput(format!(
            "{what}: spatial dims {h}x{w} smaller than kernel {kernel}"
        )));
    }
    Ok(())
}

/// Initial block: large-kernel conv on the spliced 2-channel pair, then
/// normalization, then ReLU. The conv has no bias when followed by a
/// mean-removing norm (the bias gradient would be identically zero).
pub struct InitBlock {
    conv: ConvLayer,
    norm: NormLayer,
}

impl InitBlock {
    pub(crate) fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Self {
        let kind = match cfg.init_norm {
            InitNorm::Instance => NormKind::Instance,
            InitNorm::Batch => NormKind::Batch,
            InitNorm::None => NormKind::None,
        };
        let with_bias = kind == NormKind::None;
        let conv = ConvLayer::new(
            init,
            "init.conv",
            2,
            cfg.channel_widths[0],
            cfg.init_kernel,
            1,
            1,
            with_bias,
        );
        let norm = NormLayer::new(init, "init.norm", kind, cfg.channel_widths[0]);
        InitBlock { conv, norm }
    }

    /// Normalized pre-activation features (before ReLU).
    pub fn forward_normalized<'t>(&self, ctx: &Forward<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        contract(x.shape()[1] == 2, || {
            format!(
                "init block expects a spliced 2-channel pair, got {} channels",
                x.shape()[1]
            )
        })?;
        check_spatial(&x, self.conv.kernel, "init block")?;
        Ok(self.norm.forward(ctx, self.conv.forward(ctx, x)))
    }

    pub fn forward<'t>(&self, ctx: &Forward<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_normalized(ctx, x)?.relu())
    }
}

/// Residual block of two (norm -> ReLU -> dropout -> conv) sub-blocks.
pub struct LkcBlock {
    norm1: NormLayer,
    conv1: ConvLayer,
    norm2: NormLayer,
    conv2: ConvLayer,
    dropout_p: f64,
    channels: usize,
}

impl LkcBlock {
    pub(crate) fn new(
        init: &mut Init<'_>,
        name: &str,
        cfg: &ModelConfig,
        channels: usize,
        kernel: usize,
    ) -> Self {
        let kind = body_norm_kind(cfg, channels);
        LkcBlock {
            norm1: NormLayer::new(init, &format!("{name}.norm1"), kind, channels),
            conv1: ConvLayer::new(init, &format!("{name}.conv1"), channels, channels, kernel, 1, 1, true),
            norm2: NormLayer::new(init, &format!("{name}.norm2"), kind, channels),
            // residual branches start small (but not zero) so stacked blocks
            // keep unit-scale activations and every branch carries gradient
            conv2: ConvLayer::with_weight_scale(
                init,
                &format!("{name}.conv2"),
                channels,
                channels,
                kernel,
                1,
                1,
                true,
                RESIDUAL_BRANCH_SCALE,
            ),
            dropout_p: cfg.dropout_p,
            channels,
        }
    }

    pub fn forward<'t>(&self, ctx: &Forward<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        contract(x.shape()[1] == self.channels, || {
            format!(
                "lkc block expects {} channels, got {}",
                self.channels,
                x.shape()[1]
            )
        })?;
        check_spatial(&x, self.conv1.kernel, "lkc block")?;
        let h = self
            .conv1
            .forward(ctx, ctx.dropout(self.norm1.forward(ctx, x).relu(), self.dropout_p));
        let h = self
            .conv2
            .forward(ctx, ctx.dropout(self.norm2.forward(ctx, h).relu(), self.dropout_p));
        Ok(x.add(h))
    }
}

/// Depthwise companion block: single-group GN, pointwise expansion (2x),
/// depthwise large-kernel conv, ReLU, pointwise projection, residual.
/// When the body norm kind is GN it always uses exactly one group here.
pub struct LkdcBlock {
    norm: NormLayer,
    expand: ConvLayer,
    dw: ConvLayer,
    project: ConvLayer,
    channels: usize,
}

impl LkdcBlock {
    pub(crate) fn new(
        init: &mut Init<'_>,
        name: &str,
        cfg: &ModelConfig,
        channels: usize,
        kernel: usize,
    ) -> Self {
        let kind = match cfg.body_norm {
            BodyNorm::Group => NormKind::Group(1),
            BodyNorm::Batch => NormKind::Batch,
            BodyNorm::None => NormKind::None,
        };
        let mid = channels * 2;
        LkdcBlock {
            norm: NormLayer::new(init, &format!("{name}.norm"), kind, channels),
            expand: ConvLayer::new(init, &format!("{name}.expand"), channels, mid, 1, 1, 1, true),
            dw: ConvLayer::new(init, &format!("{name}.dw"), mid, mid, kernel, 1, mid, true),
            project: ConvLayer::with_weight_scale(
                init,
                &format!("{name}.project"),
                mid,
                channels,
                1,
                1,
                1,
                true,
                RESIDUAL_BRANCH_SCALE,
            ),
            channels,
        }
    }

    /// Group count of the norm inside this block (always 1 for GN).
    pub fn norm_groups(&self) -> usize {
        match self.norm.kind {
            NormKind::Group(g) => g,
            _ => 0,
        }
    }

    pub fn forward<'t>(&self, ctx: &Forward<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        contract(x.shape()[1] == self.channels, || {
            format!(
                "lkdc block expects {} channels, got {}",
                self.channels,
                x.shape()[1]
            )
        })?;
        check_spatial(&x, self.dw.kernel, "lkdc block")?;
        let h = self.norm.forward(ctx, x);
        let h = self.expand.forward(ctx, h);
        let h = self.dw.forward(ctx, h).relu();
        let h = self.project.forward(ctx, h);
        Ok(x.add(h))
    }
}

/// Stride-2 3x3 convolution halving the resolution.
pub struct Downsample {
    conv: ConvLayer,
}

impl Downsample {
    pub(crate) fn new(init: &mut Init<'_>, name: &str, c_in: usize, c_out: usize) -> Self {
        Downsample {
            conv: ConvLayer::new(init, &format!("{name}.conv"), c_in, c_out, 3, 2, 1, true),
        }
    }

    pub fn forward<'t>(&self, ctx: &Forward<'t, '_>, x: Var<'t>) -> Var<'t> {
        self.conv.forward(ctx, x)
    }
}

/// Bilinear x2 upsampling followed by a 3x3 conv (checkerboard-free).
pub struct Upsample {
    conv: ConvLayer,
}

impl Upsample {
    pub(crate) fn new(init: &mut Init<'_>, name: &str, c_in: usize, c_out: usize) -> Self {
        Upsample {
            conv: ConvLayer::new(init, &format!("{name}.conv"), c_in, c_out, 3, 1, 1, true),
        }
    }

    pub fn forward<'t>(&self, ctx: &Forward<'t, '_>, x: Var<'t>) -> Var<'t> {
        self.conv.forward(ctx, x.upsample_bilinear_x2())
    }
}

pub(crate) fn fuse_conv(init: &mut Init<'_>, name: &str, channels: usize) -> ConvLayer {
    ConvLayer::new(init, name, 2 * channels, channels, 3, 1, 1, true)
}

#[cfg(test)]
mod tests {
    use super::super::config::ModelConfig;
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn ctx_and_store(
        build: impl FnOnce(&mut Init<'_>) -> Box<dyn FnOnce(&Forward<'_, '_>) -> Result<()>>,
    ) {
        let mut store = super::super::params::ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let check = build(&mut init);
        let tape = Tape::new();
        let ctx = Forward::inference(&tape, &store);
        check(&ctx).unwrap();
    }

    fn rand_tensor(seed: u64, shape: crate::tensor::Shape) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rand::Rng::random::<f64>(&mut rng))
    }

    #[test]
    fn init_block_shape_and_contracts() {
        let cfg = ModelConfig::default();
        ctx_and_store(|init| {
            let block = InitBlock::new(init, &cfg);
            Box::new(move |ctx| {
                let x = ctx.tape.leaf(rand_tensor(1, [1, 2, 64, 64]));
                let y = block.forward(ctx, x)?;
                assert_eq!(y.shape(), [1, 32, 64, 64]);
                // wrong channel count
                let bad = ctx.tape.leaf(rand_tensor(2, [1, 3, 64, 64]));
                assert!(matches!(
                    block.forward(ctx, bad),
                    Err(Error::ContractViolation(_))
                ));
                // kernel larger than image
                let small = ctx.tape.leaf(rand_tensor(3, [1, 2, 8, 8]));
                assert!(matches!(
                    block.forward(ctx, small),
                    Err(Error::RejectedInput(_))
                ));
                Ok(())
            })
        });
    }

    #[test]
    fn init_block_constant_input_constant_output() {
        let cfg = ModelConfig::default();
        ctx_and_store(|init| {
            let block = InitBlock::new(init, &cfg);
            Box::new(move |ctx| {
                let x = ctx.tape.leaf(Tensor::zeros([1, 2, 32, 32]));
                let y = block.forward(ctx, x)?.value();
                // translation-invariant conv + norm of a constant field:
                // each channel is a constant map
                for c in 0..y.channels() {
                    let first = y.at(0, c, 0, 0);
                    for h in 0..y.height() {
                        for w in 0..y.width() {
                            assert!((y.at(0, c, h, w) - first).abs() < 1e-12);
                        }
                    }
                }
                Ok(())
            })
        });
    }

    #[test]
    fn init_block_instance_norm_scale_invariance() {
        // sample 2 = 2 x sample 1 -> identical normalized pre-activations,
        // verified against a direct per-sample IN computation
        let cfg = ModelConfig::default();
        ctx_and_store(|init| {
            let block = InitBlock::new(init, &cfg);
            Box::new(move |ctx| {
                let base = rand_tensor(5, [1, 2, 32, 32]);
                let mut both = Tensor::zeros([2, 2, 32, 32]);
                for i in 0..base.numel() {
                    both.data_mut()[i] = base.data()[i];
                    both.data_mut()[base.numel() + i] = 2.0 * base.data()[i];
                }
                let y = block.forward_normalized(ctx, ctx.tape.leaf(both))?.value();
                let plane = 32 * 32;
                // identical up to the eps stabilizer inside the norm
                for c in 0..y.channels() {
                    for p in 0..plane {
                        let a = y.data()[c * plane + p];
                        let b = y.data()[y.channels() * plane + c * plane + p];
                        assert!(
                            (a - b).abs() < 1e-4 * (1.0 + a.abs()),
                            "normalized features differ at c={c} p={p}: {a} vs {b}"
                        );
                    }
                }
                Ok(())
            })
        });
    }

    #[test]
    fn lkc_block_preserves_shape_and_is_deterministic() {
        let cfg = ModelConfig::default().with_desk_widths();
        ctx_and_store(|init| {
            let block = LkcBlock::new(init, "t.lkc", &cfg, 8, 15);
            Box::new(move |ctx| {
                let x = ctx.tape.leaf(rand_tensor(7, [1, 8, 64, 64]));
                let y1 = block.forward(ctx, x)?.value();
                assert_eq!(y1.shape(), [1, 8, 64, 64]);
                let y2 = block.forward(ctx, x)?.value();
                assert_eq!(y1, y2, "dropout_p = 0 forward must be deterministic");
                Ok(())
            })
        });
    }

    #[test]
    fn lkc_block_zero_final_conv_is_identity() {
        let cfg = ModelConfig::default().with_desk_widths();
        let mut store = super::super::params::ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let block = LkcBlock::new(&mut init, "t.lkc", &cfg, 8, 5);
        // zero the final conv
        let wid = store.id_of("t.lkc.conv2.weight").unwrap();
        let bid = store.id_of("t.lkc.conv2.bias").unwrap();
        store.set(wid, Tensor::zeros(store.get(wid).shape()));
        store.set(bid, Tensor::zeros(store.get(bid).shape()));
        let tape = Tape::new();
        let ctx = Forward::inference(&tape, &store);
        let xt = rand_tensor(11, [2, 8, 16, 16]);
        let y = block.forward(&ctx, tape.leaf(xt.clone())).unwrap().value();
        assert_eq!(y, xt, "residual identity");
    }

    #[test]
    fn lkdc_block_zero_projection_is_identity_and_single_group() {
        let mut cfg = ModelConfig::default().with_desk_widths();
        cfg.gn_groups_body = 8;
        let mut store = super::super::params::ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let block = LkdcBlock::new(&mut init, "t.lkdc", &cfg, 16, 7);
        assert_eq!(block.norm_groups(), 1, "lkdc norm must use exactly 1 group");
        let wid = store.id_of("t.lkdc.project.weight").unwrap();
        let bid = store.id_of("t.lkdc.project.bias").unwrap();
        store.set(wid, Tensor::zeros(store.get(wid).shape()));
        store.set(bid, Tensor::zeros(store.get(bid).shape()));
        let tape = Tape::new();
        let ctx = Forward::inference(&tape, &store);
        let xt = rand_tensor(12, [1, 16, 32, 32]);
        let y = block.forward(&ctx, tape.leaf(xt.clone())).unwrap().value();
        assert_eq!(y, xt, "residual identity");
    }

    #[test]
    fn lkdc_shape_preservation() {
        let cfg = ModelConfig::default();
        ctx_and_store(|init| {
            let block = LkdcBlock::new(init, "t.lkdc", &cfg, 64, 7);
            Box::new(move |ctx| {
                let x = ctx.tape.leaf(rand_tensor(13, [1, 64, 32, 32]));
                let y = block.forward(ctx, x)?;
                assert_eq!(y.shape(), [1, 64, 32, 32]);
                Ok(())
            })
        });
    }

    #[test]
    fn resolution_layers() {
        ctx_and_store(|init| {
            let down = Downsample::new(init, "t.down", 8, 16);
            let up = Upsample::new(init, "t.up", 16, 8);
            Box::new(move |ctx| {
                let x = ctx.tape.leaf(rand_tensor(14, [1, 8, 32, 32]));
                let d = down.forward(ctx, x);
                assert_eq!(d.shape(), [1, 16, 16, 16]);
                let u = up.forward(ctx, d);
                assert_eq!(u.shape(), [1, 8, 32, 32]);
                Ok(())
            })
        });
    }

    #[test]
    fn batch_norm_running_stats_update_in_training() {
        let mut store = super::super::params::ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(20);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let norm = NormLayer::new(&mut init, "t.bn", NormKind::Batch, 4);
        let tape = Tape::new();
        let ctx = Forward::training(&tape, &store, ChaCha12Rng::seed_from_u64(0));
        let x = rand_tensor(21, [2, 4, 8, 8]).map(|v| v * 3.0 + 1.0);
        let _ = norm.forward(&ctx, tape.leaf(x));
        let updates = ctx.take_buffer_updates();
        assert_eq!(updates.len(), 2);
        // running mean moved toward the batch mean (which is ~2.5, far from 0)
        let (_, new_mean) = &updates[0];
        assert!(new_mean.data().iter().all(|&v| v > 0.1));
        drop(ctx);
        let _ = norm;
    }
}
