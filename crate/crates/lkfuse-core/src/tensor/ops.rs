//! Differentiable tensor operations.
//!
//! Binary ops broadcast NumPy-style over the four dims (sizes must match or
//! be 1); their backward pass sums gradients back down to each operand's
//! shape.

use super::tape::{BackwardFn, Var};
use super::{binary_bcast, reduce_to_shape, Tensor};

/// How values are grouped when computing normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormDomain {
    /// One group per (sample, channel): instance normalization.
    PerInstance,
    /// `n` groups of channels per sample: group normalization.
    PerGroup(usize),
    /// One group per channel across the whole batch: batch-norm training stats.
    PerChannelBatch,
}

impl<'t> Var<'t> {
    fn binary(
        self,
        other: Var<'t>,
        context: &'static str,
        f: impl Fn(f64, f64) -> f64,
        back: impl Fn(&Tensor, &Tensor, &Tensor) -> (Tensor, Tensor) + 'static,
    ) -> Var<'t> {
        assert!(self.same_tape(&other), "{context}: vars from different tapes");
        let (a, b) = (self.value(), other.value());
        let out = binary_bcast(&a, &b, context, f);
        let (ia, ib) = (self.idx, other.idx);
        let (sa, sb) = (a.shape(), b.shape());
        let backward: BackwardFn = Box::new(move |g| {
            let (ga, gb) = back(g, &a, &b);
            vec![
                (ia, reduce_to_shape(&ga, sa)),
                (ib, reduce_to_shape(&gb, sb)),
            ]
        });
        self.tape.push(out, Some(backward))
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.binary(
            other,
            "add",
            |a, b| a + b,
            |g, a, b| {
                let shape = super::broadcast_shape(a.shape(), b.shape(), "add");
                debug_assert_eq!(g.shape(), shape);
                (g.clone(), g.clone())
            },
        )
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary(
            other,
            "sub",
            |a, b| a - b,
            |g, _a, _b| (g.clone(), g.map(|v| -v)),
        )
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.binary(
            other,
            "mul",
            |a, b| a * b,
            |g, a, b| {
                (
                    binary_bcast(g, b, "mul-back", |g, b| g * b),
                    binary_bcast(g, a, "mul-back", |g, a| g * a),
                )
            },
        )
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.binary(
            other,
            "div",
            |a, b| a / b,
            |g, a, b| {
                let ga = binary_bcast(g, b, "div-back", |g, b| g / b);
                let q = binary_bcast(a, b, "div-back", |a, b| a / (b * b));
                let gb = binary_bcast(g, &q, "div-back", |g, q| -g * q);
                (ga, gb)
            },
        )
    }

    /// Elementwise maximum; gradient routes to the larger operand
    /// (ties go to `self`). Shapes must match exactly.
    pub fn maximum(self, other: Var<'t>) -> Var<'t> {
        assert_eq!(self.shape(), other.shape(), "maximum: shape mismatch");
        self.binary(
            other,
            "maximum",
            f64::max,
            |g, a, b| {
                let ga = Tensor::from_fn(g.shape(), |i| {
                    if a.data()[i] >= b.data()[i] { g.data()[i] } else { 0.0 }
                });
                let gb = Tensor::from_fn(g.shape(), |i| {
                    if a.data()[i] >= b.data()[i] { 0.0 } else { g.data()[i] }
                });
                (ga, gb)
            },
        )
    }

    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        back: impl Fn(&Tensor, &Tensor, &Tensor) -> Tensor + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let out = x.map(f);
        let saved_out = out.clone();
        let idx = self.idx;
        let backward: BackwardFn =
            Box::new(move |g| vec![(idx, back(g, &x, &saved_out))]);
        self.tape.push(out, Some(backward))
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(|v| -v, |g, _, _| g.map(|v| -v))
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |g, x, _| {
            g.zip_map(x, |g, x| g * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
        })
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(
            |v| if v > 0.0 { v } else { 0.0 },
            |g, x, _| g.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 }),
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(
            |v| 1.0 / (1.0 + (-v).exp()),
            |g, _, y| g.zip_map(y, |g, y| g * y * (1.0 - y)),
        )
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|v| v * v, |g, x, _| g.zip_map(x, |g, x| 2.0 * g * x))
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.unary(move |v| k * v, move |g, _, _| g.map(|v| k * v))
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        self.unary(move |v| v + k, |g, _, _| g.clone())
    }

    pub fn sum_all(self) -> Var<'t> {
        let x = self.value();
        let out = Tensor::scalar(x.data().iter().sum());
        let idx = self.idx;
        let shape = x.shape();
        let backward: BackwardFn =
            Box::new(move |g| vec![(idx, Tensor::full(shape, g.item()))]);
        self.tape.push(out, Some(backward))
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.shape().iter().product::<usize>() as f64;
        let x = self.value();
        let out = Tensor::scalar(x.data().iter().sum::<f64>() / n);
        let idx = self.idx;
        let shape = x.shape();
        let backward: BackwardFn =
            Box::new(move |g| vec![(idx, Tensor::full(shape, g.item() / n))]);
        self.tape.push(out, Some(backward))
    }

    /// Mean over H and W, keeping dims: `(B,C,H,W) -> (B,C,1,1)`.
    pub fn global_avg_pool(self) -> Var<'t> {
        let x = self.value();
        let [b, c, h, w] = x.shape();
        let hw = (h * w) as f64;
        let mut out = Tensor::zeros([b, c, 1, 1]);
        {
            let o = out.data_mut();
            for (i, chunk) in x.data().chunks_exact(h * w).enumerate() {
                o[i] = chunk.iter().sum::<f64>() / hw;
            }
        }
        let idx = self.idx;
        let backward: BackwardFn = Box::new(move |g| {
            let mut dx = Tensor::zeros([b, c, h, w]);
            let d = dx.data_mut();
            for (i, chunk) in d.chunks_exact_mut(h * w).enumerate() {
                let v = g.data()[i] / hw;
                chunk.fill(v);
            }
            vec![(idx, dx)]
        });
        self.tape.push(out, Some(backward))
    }

    /// Max over H and W, keeping dims: `(B,C,H,W) -> (B,C,1,1)`.
    /// Gradient flows to the first maximal element of each plane.
    pub fn global_max_pool(self) -> Var<'t> {
        let x = self.value();
        let [b, c, h, w] = x.shape();
        let mut out = Tensor::zeros([b, c, 1, 1]);
        let mut argmax = vec![0usize; b * c];
        {
            let o = out.data_mut();
            for (i, chunk) in x.data().chunks_exact(h * w).enumerate() {
                let (mut best, mut best_at) = (f64::NEG_INFINITY, 0);
                for (j, &v) in chunk.iter().enumerate() {
                    if v > best {
                        best = v;
                        best_at = j;
                    }
                }
                o[i] = best;
                argmax[i] = best_at;
            }
        }
        let idx = self.idx;
        let backward: BackwardFn = Box::new(move |g| {
            let mut dx = Tensor::zeros([b, c, h, w]);
            let d = dx.data_mut();
            for i in 0..b * c {
                d[i * h * w + argmax[i]] = g.data()[i];
            }
            vec![(idx, dx)]
        });
        self.tape.push(out, Some(backward))
    }

    /// Mean over channels, keeping dims: `(B,C,H,W) -> (B,1,H,W)`.
    pub fn channel_mean(self) -> Var<'t> {
        let x = self.value();
        let [b, c, h, w] = x.shape();
        let hw = h * w;
        let mut out = Tensor::zeros([b, 1, h, w]);
        {
            let o = out.data_mut();
            let d = x.data();
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * hw;
                    for p in 0..hw {
                        o[bi * hw + p] += d[base + p];
                    }
                }
            }
            let inv = 1.0 / c as f64;
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let idx = self.idx;
        let backward: BackwardFn = Box::new(move |g| {
            let mut dx = Tensor::zeros([b, c, h, w]);
            let d = dx.data_mut();
            let inv = 1.0 / c as f64;
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * hw;
                    for p in 0..hw {
                        d[base + p] = g.data()[bi * hw + p] * inv;
                    }
                }
            }
            vec![(idx, dx)]
        });
        self.tape.push(out, Some(backward))
    }

    /// Max over channels, keeping dims: `(B,C,H,W) -> (B,1,H,W)`.
    pub fn channel_max(self) -> Var<'t> {
        let x = self.value();
        let [b, c, h, w] = x.shape();
        let hw = h * w;
        let mut out = Tensor::full([b, 1, h, w], f64::NEG_INFINITY);
        let mut argmax = vec![0usize; b * hw];
        {
            let o = out.data_mut();
            let d = x.data();
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * hw;
                    for p in 0..hw {
                        if d[base + p] > o[bi * hw + p] {
                            o[bi * hw + p] = d[base + p];
                            argmax[bi * hw + p] = ci;
                        }
                    }
                }
            }
        }
        let idx = self.idx;
        let backward: BackwardFn = Box::new(move |g| {
            let mut dx = Tensor::zeros([b, c, h, w]);
            let d = dx.data_mut();
            for bi in 0..b {
                for p in 0..hw {
                    let ci = argmax[bi * hw + p];
                    d[(bi * c + ci) * hw + p] = g.data()[bi * hw + p];
                }
            }
            vec![(idx, dx)]
        });
        self.tape.push(out, Some(backward))
    }

    /// Slice a channel range, keeping all other dims.
    pub fn slice_channels(self, start: usize, len: usize) -> Var<'t> {
        let x = self.value();
        let [b, c, h, w] = x.shape();
        assert!(start + len <= c, "slice_channels out of range");
        let hw = h * w;
        let mut out = Tensor::zeros([b, len, h, w]);
        {
            let o = out.data_mut();
            let d = x.data();
            for bi in 0..b {
                let src = (bi * c + start) * hw;
                let dst = bi * len * hw;
                o[dst..dst + len * hw].copy_from_slice(&d[src..src + len * hw]);
            }
        }
        let idx = self.idx;
        let backward: BackwardFn = Box::new(move |g| {
            let mut dx = Tensor::zeros([b, c, h, w]);
            let d = dx.data_mut();
            for bi in 0..b {
                let dst = (bi * c + start) * hw;
                let src = bi * len * hw;
                d[dst..dst + len * hw].copy_from_slice(&g.data()[src..src + len * hw]);
            }
            vec![(idx, dx)]
        });
        self.tape.push(out, Some(backward))
    }

    /// Normalize to zero mean / unit variance over the given domain.
    ///
    /// Backward uses the closed form
    /// `dx = (g - mean(g) - y * mean(g*y)) / sigma` per group.
    pub fn normalize(self, domain: NormDomain, eps: f64) -> Var<'t> {
        let x = self.value();
        let [b, c, h, w] = x.shape();
        let hw = h * w;
        // (start offsets are implicit: groups are contiguous except PerChannelBatch)
        let (n_groups, group_len) = match domain {
            NormDomain::PerInstance => (b * c, hw),
            NormDomain::PerGroup(n) => {
                assert!(n >= 1 && c % n == 0, "channels {c} not divisible into {n} groups");
                (b * n, (c / n) * hw)
            }
            NormDomain::PerChannelBatch => (c, b * hw),
        };
        let mut out = Tensor::zeros(x.shape());
        let mut inv_sigma = vec![0.0f64; n_groups];

        // Collect the flat indices of each group once; PerInstance/PerGroup are
        // contiguous runs, PerChannelBatch strides across the batch.
        let group_indices = |gi: usize| -> GroupIter {
            match domain {
                NormDomain::PerInstance | NormDomain::PerGroup(_) => GroupIter::Contiguous {
                    start: gi * group_len,
                    len: group_len,
                },
                NormDomain::PerChannelBatch => GroupIter::Strided {
                    channel: gi,
                    b,
                    c,
                    hw,
                },
            }
        };

        {
            let o = out.data_mut();
            let d = x.data();
            for gi in 0..n_groups {
                let idxs = group_indices(gi);
                let mut sum = 0.0;
                let mut sum_sq = 0.0;
                idxs.for_each(|i| {
                    sum += d[i];
                    sum_sq += d[i] * d[i];
                });
                let m = group_len as f64;
                let mean = sum / m;
                let var = (sum_sq / m - mean * mean).max(0.0);
                let inv = 1.0 / (var + eps).sqrt();
                inv_sigma[gi] = inv;
                group_indices(gi).for_each(|i| o[i] = (d[i] - mean) * inv);
            }
        }

        let idx = self.idx;
        let y = out.clone();
        let backward: BackwardFn = Box::new(move |g| {
            let mut dx = Tensor::zeros([b, c, h, w]);
            let d = dx.data_mut();
            let gd = g.data();
            let yd = y.data();
            let m = group_len as f64;
            for gi in 0..n_groups {
                let idxs = match domain {
                    NormDomain::PerInstance | NormDomain::PerGroup(_) => GroupIter::Contiguous {
                        start: gi * group_len,
                        len: group_len,
                    },
                    NormDomain::PerChannelBatch => GroupIter::Strided {
                        channel: gi,
                        b,
                        c,
                        hw,
                    },
                };
                let mut g_mean = 0.0;
                let mut gy_mean = 0.0;
                idxs.for_each(|i| {
                    g_mean += gd[i];
                    gy_mean += gd[i] * yd[i];
                });
                g_mean /= m;
                gy_mean /= m;
                let inv = inv_sigma[gi];
                let idxs2 = match domain {
                    NormDomain::PerInstance | NormDomain::PerGroup(_) => GroupIter::Contiguous {
                        start: gi * group_len,
                        len: group_len,
                    },
                    NormDomain::PerChannelBatch => GroupIter::Strided {
                        channel: gi,
                        b,
                        c,
                        hw,
                    },
                };
                idxs2.for_each(|i| d[i] = (gd[i] - g_mean - yd[i] * gy_mean) * inv);
            }
            vec![(idx, dx)]
        });
        self.tape.push(out, Some(backward))
    }
}

/// Iterator over the flat element indices of one normalization group.
enum GroupIter {
    Contiguous { start: usize, len: usize },
    Strided { channel: usize, b: usize, c: usize, hw: usize },
}

impl GroupIter {
    fn for_each(self, mut f: impl FnMut(usize)) {
        match self {
            GroupIter::Contiguous { start, len } => {
                for i in start..start + len {
                    f(i);
                }
            }
            GroupIter::Strided { channel, b, c, hw } => {
                for bi in 0..b {
                    let base = (bi * c + channel) * hw;
                    for p in 0..hw {
                        f(base + p);
                    }
                }
            }
        }
    }
}

/// Concatenate along the channel dimension.
pub fn concat_channels<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat_channels: no inputs");
    let tape = parts[0].tape;
    let values: Vec<Tensor> = parts.iter().map(|v| v.value()).collect();
    let [b, _, h, w] = values[0].shape();
    let total_c: usize = values
        .iter()
        .map(|v| {
            assert_eq!(v.batch(), b, "concat_channels: batch mismatch");
            assert_eq!((v.height(), v.width()), (h, w), "concat_channels: spatial mismatch");
            v.channels()
        })
        .sum();
    let hw = h * w;
    let mut out = Tensor::zeros([b, total_c, h, w]);
    {
        let o = out.data_mut();
        for bi in 0..b {
            let mut coff = 0;
            for v in &values {
                let ci = v.channels();
                let src = bi * ci * hw;
                let dst = (bi * total_c + coff) * hw;
                o[dst..dst + ci * hw].copy_from_slice(&v.data()[src..src + ci * hw]);
                coff += ci;
            }
        }
    }
    let idxs: Vec<usize> = parts.iter().map(|v| v.idx).collect();
    let channel_counts: Vec<usize> = values.iter().map(|v| v.channels()).collect();
    let backward: BackwardFn = Box::new(move |g| {
        let mut grads = Vec::with_capacity(idxs.len());
        let mut coff = 0;
        for (&idx, &ci) in idxs.iter().zip(&channel_counts) {
            let mut dx = Tensor::zeros([b, ci, h, w]);
            {
                let d = dx.data_mut();
                for bi in 0..b {
                    let src = (bi * total_c + coff) * hw;
                    let dst = bi * ci * hw;
                    d[dst..dst + ci * hw].copy_from_slice(&g.data()[src..src + ci * hw]);
                }
            }
            grads.push((idx, dx));
            coff += ci;
        }
        grads
    });
    tape.push(out, Some(backward))
}

#[cfg(test)]
mod tests {
    use super::super::{Shape, Tape, Tensor};
    use super::*;

    fn fd_grad(
        inputs: &[Tensor],
        which: usize,
        eval: &dyn Fn(&[Tensor]) -> f64,
        h: f64,
    ) -> Tensor {
        let mut g = Tensor::zeros(inputs[which].shape());
        for i in 0..inputs[which].numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= h;
            g.data_mut()[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        g
    }

    fn assert_close(analytic: &Tensor, numeric: &Tensor, tol: f64, what: &str) {
        for i in 0..analytic.numel() {
            let (a, n) = (analytic.data()[i], numeric.data()[i]);
            assert!(
                (a - n).abs() <= tol * (1.0 + n.abs()),
                "{what}: grad[{i}] analytic {a} vs numeric {n}"
            );
        }
    }

    fn ramp(shape: Shape, scale: f64, offset: f64) -> Tensor {
        Tensor::from_fn(shape, |i| {
            ((i.wrapping_mul(2654435761)) % 1000) as f64 / 1000.0 * scale + offset
        })
    }

    macro_rules! gradcheck_case {
        ($name:ident, $inputs:expr, |$v:ident| $body:expr) => {
            #[test]
            fn $name() {
                fn build<'t>($v: &[Var<'t>]) -> Var<'t> {
                    $body
                }
                let inputs: Vec<Tensor> = $inputs;
                let eval = |ts: &[Tensor]| -> f64 {
                    let tape = Tape::new();
                    let vars: Vec<Var<'_>> = ts.iter().map(|t| tape.leaf(t.clone())).collect();
                    build(&vars).item()
                };
                let tape = Tape::new();
                let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
                let out = build(&vars);
                let grads = tape.backward(out);
                for which in 0..inputs.len() {
                    let numeric = fd_grad(&inputs, which, &eval, 1e-6);
                    let analytic = grads.wrt(vars[which]);
                    assert_close(&analytic, &numeric, 1e-6, stringify!($name));
                }
            }
        };
    }

    gradcheck_case!(
        grad_add_bcast,
        vec![ramp([2, 3, 2, 2], 1.0, -0.3), ramp([1, 3, 1, 1], 0.5, 0.1)],
        |v| v[0].add(v[1]).square().mean_all()
    );

    gradcheck_case!(
        grad_mul_cross_bcast,
        vec![ramp([2, 3, 1, 1], 1.0, 0.2), ramp([2, 1, 3, 2], 1.0, -0.5)],
        |v| v[0].mul(v[1]).sum_all()
    );

    gradcheck_case!(
        grad_div,
        vec![ramp([1, 2, 2, 2], 1.0, 0.1), ramp([1, 2, 2, 2], 0.5, 1.2)],
        |v| v[0].div(v[1]).mean_all()
    );

    gradcheck_case!(
        grad_maximum,
        vec![ramp([1, 2, 3, 3], 1.0, 0.0), ramp([1, 2, 3, 3], 1.0, 0.05)],
        |v| v[0].maximum(v[1]).square().mean_all()
    );

    gradcheck_case!(
        grad_sigmoid_relu_abs,
        vec![ramp([1, 2, 3, 3], 2.0, -0.9)],
        |v| v[0].sigmoid().mul(v[0].relu()).add(v[0].abs()).mean_all()
    );

    gradcheck_case!(
        grad_norm_instance,
        vec![ramp([2, 3, 3, 3], 2.0, -0.4)],
        |v| v[0].normalize(NormDomain::PerInstance, 1e-5).square().mean_all()
    );

    gradcheck_case!(
        grad_norm_group,
        vec![ramp([2, 4, 3, 3], 1.5, 0.3)],
        |v| v[0].normalize(NormDomain::PerGroup(2), 1e-5).square().mean_all()
    );

    gradcheck_case!(
        grad_norm_batch,
        vec![ramp([3, 2, 2, 2], 1.5, -0.2)],
        |v| {
            v[0]
                .normalize(NormDomain::PerChannelBatch, 1e-5)
                .sigmoid()
                .mean_all()
        }
    );

    gradcheck_case!(
        grad_pools,
        vec![ramp([2, 3, 4, 4], 1.0, -0.5)],
        |v| {
            let a = v[0].global_avg_pool();
            let m = v[0].global_max_pool();
            a.add(m).square().sum_all()
        }
    );

    gradcheck_case!(
        grad_channel_stats,
        vec![ramp([2, 4, 3, 3], 1.0, -0.5)],
        |v| {
            let m = v[0].channel_mean();
            let x = v[0].channel_max();
            m.mul(x).mean_all()
        }
    );

    gradcheck_case!(
        grad_concat_slice,
        vec![ramp([2, 2, 2, 2], 1.0, 0.0), ramp([2, 3, 2, 2], 1.0, -0.3)],
        |v| {
            let cat = concat_channels(&[v[0], v[1]]);
            cat.slice_channels(1, 3).square().mean_all()
        }
    );

    #[test]
    fn normalize_per_instance_matches_manual() {
        let tape = Tape::new();
        let x = Tensor::from_fn([1, 1, 2, 2], |i| i as f64);
        let v = tape.leaf(x.clone());
        let y = v.normalize(NormDomain::PerInstance, 0.0).value();
        let mean = 1.5;
        let var = 1.25f64;
        for i in 0..4 {
            let expect = (i as f64 - mean) / var.sqrt();
            assert!((y.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_domain_mixes_samples() {
        // Same values per sample -> PerChannelBatch output differs from PerInstance
        let tape = Tape::new();
        let x = Tensor::new([2, 1, 1, 2], vec![0.0, 1.0, 10.0, 11.0]);
        let v = tape.leaf(x);
        let inst = v.normalize(NormDomain::PerInstance, 0.0).value();
        let batch = v.normalize(NormDomain::PerChannelBatch, 0.0).value();
        // per instance both samples normalize to [-1, 1]
        assert!((inst.data()[0] + 1.0).abs() < 1e-12 && (inst.data()[2] + 1.0).abs() < 1e-12);
        // per batch the two samples land far apart
        assert!(batch.data()[0] < -0.5 && batch.data()[2] > 0.5);
    }
}
