//! Composite training objective: structure (SSIM), intensity and gradient
//! terms with unit weights.
//!
//! All terms are pure functions of single-channel `(B,1,H,W)` tensors in
//! `[0,1]` and are differentiable through the tape. Array-level wrappers
//! evaluate on a throwaway tape for callers that only need the value.
//!
//! Definitions:
//! - `loss_ssim = 1 - (ssim(A,F) + ssim(B,F)) / 2`
//! - `loss_int  = mean |F - max(A,B)|`
//! - `loss_grad = mean | |∇F| - max(|∇A|, |∇B|) |` with `|∇I| = |Sobel_x I| + |Sobel_y I|`
//!   under reflect-101 border handling, so the gradient map covers the full image.
//!
//! SSIM uses a Gaussian window (sigma 1.5) of size 11, shrunk to the largest
//! odd size that fits when images are smaller than 11; stabilizers are
//! K1 = 0.01, K2 = 0.03 at the given dynamic range. Two identical constant
//! images score exactly 1.

use crate::error::{Error, Result};
use crate::tensor::{Conv2dSpec, PadMode, Tape, Tensor, Var};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Per-term values of the composite objective. `l_total` is the plain sum,
/// so `l_total == l_ssim + l_int + l_grad` holds bit-exactly.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub l_ssim: f64,
    pub l_int: f64,
    pub l_grad: f64,
    pub l_total: f64,
}

/// The three terms and their sum as live graph nodes.
pub struct LossTerms<'t> {
    pub ssim: Var<'t>,
    pub int: Var<'t>,
    pub grad: Var<'t>,
    pub total: Var<'t>,
}

impl LossTerms<'_> {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            l_ssim: self.ssim.item(),
            l_int: self.int.item(),
            l_grad: self.grad.item(),
            l_total: self.total.item(),
        }
    }
}

fn check_pair(a: &Var<'_>, b: &Var<'_>, context: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            context,
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    if a.shape()[1] != 1 {
        return Err(Error::ContractViolation(format!(
            "{context}: expected single-channel input, got {} channels",
            a.shape()[1]
        )));
    }
    Ok(())
}

/// Normalized 2-D Gaussian window as a (1,1,size,size) convolution weight.
pub(crate) fn gaussian_window(size: usize, sigma: f64) -> Tensor {
    let c = (size - 1) as f64 / 2.0;
    let mut k = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            k.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    Tensor::new([1, 1, size, size], k)
}

/// Largest odd window size that fits both spatial dims, capped at `SSIM_WINDOW`.
pub(crate) fn ssim_window_for(h: usize, w: usize) -> usize {
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    size.max(1)
}

/// Structural similarity index over valid Gaussian windows.
pub fn ssim_index_var<'t>(x: Var<'t>, y: Var<'t>, dynamic_range: f64) -> Result<Var<'t>> {
    check_pair(&x, &y, "ssim_index")?;
    let [_, _, h, w] = x.shape();
    let size = ssim_window_for(h, w);
    let win = x.tape().leaf(gaussian_window(size, SSIM_SIGMA));
    let spec = Conv2dSpec::default();
    let c1 = (SSIM_K1 * dynamic_range).powi(2);
    let c2 = (SSIM_K2 * dynamic_range).powi(2);

    let mu_x = x.conv2d(win, None, spec);
    let mu_y = y.conv2d(win, None, spec);
    let sigma_x = x.mul(x).conv2d(win, None, spec).sub(mu_x.mul(mu_x));
    let sigma_y = y.mul(y).conv2d(win, None, spec).sub(mu_y.mul(mu_y));
    let sigma_xy = x.mul(y).conv2d(win, None, spec).sub(mu_x.mul(mu_y));

    let num = mu_x
        .mul(mu_y)
        .scale(2.0)
        .add_scalar(c1)
        .mul(sigma_xy.scale(2.0).add_scalar(c2));
    let den = mu_x
        .mul(mu_x)
        .add(mu_y.mul(mu_y))
        .add_scalar(c1)
        .mul(sigma_x.add(sigma_y).add_scalar(c2));
    Ok(num.div(den).mean_all())
}

/// Absolute-gradient magnitude map `|Sobel_x I| + |Sobel_y I|` with
/// reflect-101 borders; output has the input's shape.
pub fn gradient_magnitude_var<'t>(x: Var<'t>) -> Var<'t> {
    let gx = x.tape().leaf(Tensor::new(
        [1, 1, 3, 3],
        vec![-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0],
    ));
    let gy = x.tape().leaf(Tensor::new(
        [1, 1, 3, 3],
        vec![-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0],
    ));
    let padded = x.pad_mirror(1, PadMode::Reflect);
    let spec = Conv2dSpec::default();
    padded
        .conv2d(gx, None, spec)
        .abs()
        .add(padded.conv2d(gy, None, spec).abs())
}

/// `1 - mean(ssim(A,F), ssim(B,F))` in `[0,2]`.
pub fn loss_ssim_var<'t>(a: Var<'t>, b_y: Var<'t>, f: Var<'t>) -> Result<Var<'t>> {
    check_pair(&a, &f, "loss_ssim")?;
    check_pair(&b_y, &f, "loss_ssim")?;
    let sa = ssim_index_var(a, f, 1.0)?;
    let sb = ssim_index_var(b_y, f, 1.0)?;
    Ok(sa.add(sb).scale(0.5).neg().add_scalar(1.0))
}

/// Mean absolute deviation of `F` from the elementwise source maximum.
pub fn loss_int_var<'t>(f: Var<'t>, a: Var<'t>, b_y: Var<'t>) -> Result<Var<'t>> {
    check_pair(&a, &f, "loss_int")?;
    check_pair(&b_y, &f, "loss_int")?;
    Ok(f.sub(a.maximum(b_y)).abs().mean_all())
}

/// Mean absolute deviation of `|∇F|` from the strongest source gradient.
pub fn loss_grad_var<'t>(f: Var<'t>, a: Var<'t>, b_y: Var<'t>) -> Result<Var<'t>> {
    check_pair(&a, &f, "loss_grad")?;
    check_pair(&b_y, &f, "loss_grad")?;
    let gf = gradient_magnitude_var(f);
    let ga = gradient_magnitude_var(a);
    let gb = gradient_magnitude_var(b_y);
    Ok(gf.sub(ga.maximum(gb)).abs().mean_all())
}

/// All three terms plus their unit-weight sum.
pub fn loss_total_var<'t>(f: Var<'t>, a: Var<'t>, b_y: Var<'t>) -> Result<LossTerms<'t>> {
    let ssim = loss_ssim_var(a, b_y, f)?;
    let int = loss_int_var(f, a, b_y)?;
    let grad = loss_grad_var(f, a, b_y)?;
    let total = ssim.add(int).add(grad);
    Ok(LossTerms {
        ssim,
        int,
        grad,
        total,
    })
}

// ---------------------------------------------------------------------------
// array-level wrappers
// ---------------------------------------------------------------------------

pub fn ssim_index(x: &Tensor, y: &Tensor, dynamic_range: f64) -> Result<f64> {
    let tape = Tape::new();
    Ok(ssim_index_var(tape.leaf(x.clone()), tape.leaf(y.clone()), dynamic_range)?.item())
}

pub fn loss_ssim(a: &Tensor, b_y: &Tensor, f: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    Ok(loss_ssim_var(tape.leaf(a.clone()), tape.leaf(b_y.clone()), tape.leaf(f.clone()))?.item())
}

pub fn loss_int(f: &Tensor, a: &Tensor, b_y: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    Ok(loss_int_var(tape.leaf(f.clone()), tape.leaf(a.clone()), tape.leaf(b_y.clone()))?.item())
}

pub fn loss_grad(f: &Tensor, a: &Tensor, b_y: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    Ok(loss_grad_var(tape.leaf(f.clone()), tape.leaf(a.clone()), tape.leaf(b_y.clone()))?.item())
}

pub fn loss_total(f: &Tensor, a: &Tensor, b_y: &Tensor) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let terms =
        loss_total_var(tape.leaf(f.clone()), tape.leaf(a.clone()), tape.leaf(b_y.clone()))?;
    Ok(terms.breakdown())
}
