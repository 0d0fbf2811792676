//! Full-range BT.601 YCbCr conversion.
//!
//! Fusion runs on luminance; chroma planes of the color source are carried
//! through untouched and reinjected around the fused Y.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3};

/// RGB `(3,H,W)` in `[0,1]` to (Y, Cb, Cr); Y in `[0,1]`, chroma centered
/// at 0.5.
pub fn to_luminance(img: &Array3<f64>) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::ContractViolation(format!(
            "to_luminance expects 3 channels, got {c}"
        )));
    }
    let mut y = Array2::zeros((h, w));
    let mut cb = Array2::zeros((h, w));
    let mut cr = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let (r, g, b) = (img[[0, i, j]], img[[1, i, j]], img[[2, i, j]]);
            let yv = 0.299 * r + 0.587 * g + 0.114 * b;
            y[[i, j]] = yv;
            cb[[i, j]] = 0.5 + (b - yv) / 1.772;
            cr[[i, j]] = 0.5 + (r - yv) / 1.402;
        }
    }
    Ok((y, cb, cr))
}

/// Inverse BT.601 with clamping into `[0,1]`.
pub fn from_luminance(
    y: &Array2<f64>,
    cb: &Array2<f64>,
    cr: &Array2<f64>,
) -> Result<Array3<f64>> {
    if y.dim() != cb.dim() || y.dim() != cr.dim() {
        return Err(Error::ShapeMismatch {
            context: "from_luminance",
            expected: format!("{:?}", y.dim()),
            got: format!("{:?} / {:?}", cb.dim(), cr.dim()),
        });
    }
    let (h, w) = y.dim();
    let mut out = Array3::zeros((3, h, w));
    for i in 0..h {
        for j in 0..w {
            let yv = y[[i, j]];
            let cbv = cb[[i, j]] - 0.5;
            let crv = cr[[i, j]] - 0.5;
            let r = yv + 1.402 * crv;
            let b = yv + 1.772 * cbv;
            // green recovered from the luminance identity so the transform
            // pair is exactly inverse
            let g = (yv - 0.299 * r - 0.114 * b) / 0.587;
            out[[0, i, j]] = r.clamp(0.0, 1.0);
            out[[1, i, j]] = g.clamp(0.0, 1.0);
            out[[2, i, j]] = b.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}
