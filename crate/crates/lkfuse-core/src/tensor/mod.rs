//! Dense f64 tensors and reverse-mode automatic differentiation.
//!
//! Everything in the network runs on 4-D `(batch, channels, height, width)`
//! tensors. [`Tensor`] is a cheaply clonable value (copy-on-write `Arc`
//! storage); [`Tape`] records operations so a scalar result can be
//! differentiated with [`Tape::backward`]. All kernels are CPU `f64` with
//! fixed summation order, so identical inputs produce bit-identical outputs
//! regardless of thread count.

mod conv;
mod ops;
mod tape;

pub use conv::{Conv2dSpec, PadMode};
pub use ops::{concat_channels, NormDomain};
pub use tape::{Gradients, Tape, Var};

use std::fmt;
use std::sync::Arc;

/// `(batch, channels, height, width)`.
pub type Shape = [usize; 4];

/// Dense row-major f64 tensor with shared storage.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor::new(shape, vec![value; shape.iter().product()])
    }

    pub fn ones(shape: Shape) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new([1, 1, 1, 1], vec![value])
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; clones the storage if it is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        let v: &mut Vec<f64> = Arc::make_mut(&mut self.data);
        v.as_mut_slice()
    }

    /// Value of the single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        let [_, cs, hs, ws] = self.shape;
        self.data[((b * cs + c) * hs + h) * ws + w]
    }

    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, v: f64) {
        let [_, cs, hs, ws] = self.shape;
        let idx = ((b * cs + c) * hs + h) * ws + w;
        self.data_mut()[idx] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor::new(
            self.shape,
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean_value(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.numel() as f64
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", &self.data[..])
        } else {
            write!(f, " [{:.4}, {:.4}, ...]", self.data[0], self.data[1])
        }
    }
}

/// Sum `grad` down to `target` shape over dimensions where `target` is 1
/// (reverse of NumPy-style broadcasting).
pub(crate) fn reduce_to_shape(grad: &Tensor, target: Shape) -> Tensor {
    if grad.shape() == target {
        return grad.clone();
    }
    let gs = grad.shape();
    for d in 0..4 {
        assert!(
            target[d] == gs[d] || target[d] == 1,
            "cannot reduce {:?} to {:?}",
            gs,
            target
        );
    }
    let mut out = Tensor::zeros(target);
    {
        let [_, tc, th, tw] = target;
        let o = out.data_mut();
        let g = grad.data();
        let mut idx = 0;
        for b in 0..gs[0] {
            let tb = if target[0] == 1 { 0 } else { b };
            for c in 0..gs[1] {
                let tcc = if tc == 1 { 0 } else { c };
                for h in 0..gs[2] {
                    let thh = if th == 1 { 0 } else { h };
                    let row = ((tb * tc + tcc) * th + thh) * tw;
                    if tw == gs[3] {
                        for w in 0..gs[3] {
                            o[row + w] += g[idx];
                            idx += 1;
                        }
                    } else {
                        for _ in 0..gs[3] {
                            o[row] += g[idx];
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Broadcast result shape of two operand shapes (dims must match or be 1).
pub(crate) fn broadcast_shape(a: Shape, b: Shape, context: &'static str) -> Shape {
    let mut out = [0; 4];
    for d in 0..4 {
        out[d] = if a[d] == b[d] {
            a[d]
        } else if a[d] == 1 {
            b[d]
        } else if b[d] == 1 {
            a[d]
        } else {
            panic!("{context}: incompatible shapes {a:?} vs {b:?}");
        };
    }
    out
}

/// Apply `f` elementwise over broadcast operands.
pub(crate) fn binary_bcast(
    a: &Tensor,
    b: &Tensor,
    context: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(a.shape(), b.shape(), context);
    let stride = |s: Shape| {
        let base = [s[1] * s[2] * s[3], s[2] * s[3], s[3], 1];
        let mut st = [0usize; 4];
        for d in 0..4 {
            st[d] = if s[d] == 1 { 0 } else { base[d] };
        }
        st
    };
    let (sa, sb) = (stride(a.shape()), stride(b.shape()));
    let (da, db) = (a.data(), b.data());
    let mut out = Vec::with_capacity(shape.iter().product());
    for bi in 0..shape[0] {
        for c in 0..shape[1] {
            for h in 0..shape[2] {
                let ia = bi * sa[0] + c * sa[1] + h * sa[2];
                let ib = bi * sb[0] + c * sb[1] + h * sb[2];
                for w in 0..shape[3] {
                    out.push(f(da[ia + w * sa[3]], db[ib + w * sb[3]]));
                }
            }
        }
    }
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cow_storage() {
        let a = Tensor::ones([1, 1, 2, 2]);
        let mut b = a.clone();
        b.data_mut()[0] = 5.0;
        assert_eq!(a.data()[0], 1.0);
        assert_eq!(b.data()[0], 5.0);
    }

    #[test]
    fn broadcast_add_channel_vector() {
        let x = Tensor::from_fn([2, 3, 1, 2], |i| i as f64);
        let c = Tensor::new([1, 3, 1, 1], vec![10.0, 20.0, 30.0]);
        let y = binary_bcast(&x, &c, "test", |a, b| a + b);
        assert_eq!(y.shape(), [2, 3, 1, 2]);
        assert_eq!(y.at(0, 0, 0, 0), 10.0);
        assert_eq!(y.at(0, 1, 0, 1), 23.0);
        assert_eq!(y.at(1, 2, 0, 0), 40.0);
    }

    #[test]
    fn broadcast_cross() {
        // (B,C,1,1) + (B,1,H,W) -> (B,C,H,W)
        let a = Tensor::new([1, 2, 1, 1], vec![1.0, 2.0]);
        let b = Tensor::new([1, 1, 2, 2], vec![10.0, 20.0, 30.0, 40.0]);
        let y = binary_bcast(&a, &b, "test", |x, y| x + y);
        assert_eq!(y.shape(), [1, 2, 2, 2]);
        assert_eq!(y.at(0, 0, 0, 0), 11.0);
        assert_eq!(y.at(0, 1, 1, 1), 42.0);
    }

    #[test]
    fn reduce_matches_broadcast() {
        let g = Tensor::from_fn([2, 3, 2, 2], |i| i as f64);
        let r = reduce_to_shape(&g, [1, 3, 1, 1]);
        assert_eq!(r.shape(), [1, 3, 1, 1]);
        // channel 0 sums elements 0..4 and 12..16
        let expect: f64 = (0..4).map(|i| i as f64).sum::<f64>()
            + (12..16).map(|i| i as f64).sum::<f64>();
        assert_eq!(r.at(0, 0, 0, 0), expect);
    }
}
