//! Visual information fidelity for fusion (VIFF).
//!
//! Pinned definition: a 4-scale Gaussian pyramid (5x5 binomial kernel
//! [1,4,6,4,1]/16, symmetric borders, decimation by 2), per-scale moments
//! over non-overlapping 2x2 blocks, a scalar gain per block under the
//! Gaussian-scale-mixture channel model with noise variance `sigma_n^2 = 2`
//! on the 0-255 scale, and the usual clamping guards. The fidelity of the
//! fused image to one source is
//!
//! ```text
//! VIF(X,F) = sum_scales sum_blocks ln(1 + g^2 var_X / (sv^2 + sn^2))
//!          / sum_scales sum_blocks ln(1 + var_X / sn^2)
//! ```
//!
//! which weighs each scale by that source's own visual information, and
//! `VIFF(F,A,B)` is the mean over the two sources. Fully flat sources carry
//! no information (denominator zero) and raise a degenerate-metric error.

use super::check_same_dims;
use crate::error::{Error, Result};
use ndarray::Array2;

const SIGMA_N_SQ: f64 = 2.0;
const EPS: f64 = 1e-10;
const SCALES: usize = 4;
const MIN_DIM: usize = 32;

/// Binomial 5-tap smoothing followed by factor-2 decimation.
fn pyr_down(img: &Array2<f64>) -> Array2<f64> {
    let kernel = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let (h, w) = img.dim();
    let sym = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut j = i;
        loop {
            if j < 0 {
                j = -j - 1;
            } else if j >= n {
                j = 2 * n - 1 - j;
            } else {
                return j as usize;
            }
        }
    };
    // separable: rows then columns
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in kernel.iter().enumerate() {
                acc += kv * img[[y, sym(x as isize + t as isize - 2, w)]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut smooth = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in kernel.iter().enumerate() {
                acc += kv * tmp[[sym(y as isize + t as isize - 2, h), x]];
            }
            smooth[[y, x]] = acc;
        }
    }
    let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
    Array2::from_shape_fn((h2, w2), |(y, x)| smooth[[2 * y, 2 * x]])
}

/// Accumulate the numerator/denominator information sums of one scale.
fn scale_information(x: &Array2<f64>, f: &Array2<f64>) -> (f64, f64) {
    let (h, w) = x.dim();
    let (mut num, mut den) = (0.0, 0.0);
    for by in 0..h / 2 {
        for bx in 0..w / 2 {
            let (y0, x0) = (2 * by, 2 * bx);
            let (mut sx, mut sf, mut sxx, mut sff, mut sxf) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..2 {
                for dx in 0..2 {
                    let xv = x[[y0 + dy, x0 + dx]];
                    let fv = f[[y0 + dy, x0 + dx]];
                    sx += xv;
                    sf += fv;
                    sxx += xv * xv;
                    sff += fv * fv;
                    sxf += xv * fv;
                }
            }
            let mx = sx / 4.0;
            let mf = sf / 4.0;
            let mut var_x = (sxx / 4.0 - mx * mx).max(0.0);
            let var_f = (sff / 4.0 - mf * mf).max(0.0);
            let cov = sxf / 4.0 - mx * mf;

            let mut g = cov / (var_x + EPS);
            let mut sv_sq = var_f - g * cov;
            if var_x < EPS {
                g = 0.0;
                sv_sq = var_f;
                var_x = 0.0;
            }
            if var_f < EPS {
                g = 0.0;
                sv_sq = 0.0;
            }
            if g < 0.0 {
                sv_sq = var_f;
                g = 0.0;
            }
            if sv_sq < EPS {
                sv_sq = EPS;
            }
            num += (1.0 + g * g * var_x / (sv_sq + SIGMA_N_SQ)).ln();
            den += (1.0 + var_x / SIGMA_N_SQ).ln();
        }
    }
    (num, den)
}

fn vif_source(x: &Array2<f64>, f: &Array2<f64>) -> Result<f64> {
    let (mut xs, mut fs) = (x.clone(), f.clone());
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 0..SCALES {
        if scale > 0 {
            xs = pyr_down(&xs);
            fs = pyr_down(&fs);
        }
        let (n, d) = scale_information(&xs, &fs);
        num += n;
        den += d;
    }
    if den == 0.0 {
        return Err(Error::DegenerateMetric {
            metric: "VIFF",
            reason: "source image carries no information at any scale".into(),
        });
    }
    Ok(num / den)
}

/// Visual information fidelity of `f` against the two sources, averaged.
/// Inputs are grayscale on the 0-255 scale; min dimension must be at least 32
/// so the 4-scale pyramid is defined.
pub fn metric_viff(f: &Array2<f64>, a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    check_same_dims(&[f, a, b], "metric_viff")?;
    let (h, w) = f.dim();
    if h < MIN_DIM || w < MIN_DIM {
        return Err(Error::RejectedInput(format!(
            "metric_viff needs at least {MIN_DIM}x{MIN_DIM} pixels for the {SCALES}-scale pyramid, got {h}x{w}"
        )));
    }
    Ok(0.5 * (vif_source(a, f)? + vif_source(b, f)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand_img(seed: u64, h: usize, w: usize) -> Array2<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.random::<f64>() * 255.0)
    }

    // ------------------------------------------------------------------
    // Independent straight-from-definition oracle: non-separable smoothing,
    // explicit index folds, flat pixel loops. Shares no code with the
    // implementation above.
    // ------------------------------------------------------------------

    fn oracle_fold(i: isize, n: isize) -> isize {
        let mut j = i;
        while j < 0 || j >= n {
            if j < 0 {
                j = -j - 1;
            }
            if j >= n {
                j = 2 * n - 1 - j;
            }
        }
        j
    }

    fn oracle_downsample(img: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let h = img.len() as isize;
        let w = img[0].len() as isize;
        let k1 = [1.0, 4.0, 6.0, 4.0, 1.0];
        let mut out = Vec::new();
        let mut y = 0isize;
        while y < h {
            let mut row = Vec::new();
            let mut x = 0isize;
            while x < w {
                let mut acc = 0.0;
                for (ty, &ky) in k1.iter().enumerate() {
                    for (tx, &kx) in k1.iter().enumerate() {
                        let sy = oracle_fold(y + ty as isize - 2, h);
                        let sx = oracle_fold(x + tx as isize - 2, w);
                        acc += ky * kx / 256.0 * img[sy as usize][sx as usize];
                    }
                }
                row.push(acc);
                x += 2;
            }
            out.push(row);
            y += 2;
        }
        out
    }

    fn oracle_vif_one_source(x0: &Array2<f64>, f0: &Array2<f64>) -> f64 {
        let to_rows = |a: &Array2<f64>| -> Vec<Vec<f64>> {
            (0..a.nrows())
                .map(|r| (0..a.ncols()).map(|c| a[[r, c]]).collect())
                .collect()
        };
        let mut x = to_rows(x0);
        let mut f = to_rows(f0);
        let mut num = 0.0;
        let mut den = 0.0;
        for scale in 0..4 {
            if scale > 0 {
                x = oracle_downsample(&x);
                f = oracle_downsample(&f);
            }
            let bh = x.len() / 2;
            let bw = x[0].len() / 2;
            for by in 0..bh {
                for bx in 0..bw {
                    let mut xs = [0.0f64; 4];
                    let mut fs = [0.0f64; 4];
                    for i in 0..4 {
                        xs[i] = x[2 * by + i / 2][2 * bx + i % 2];
                        fs[i] = f[2 * by + i / 2][2 * bx + i % 2];
                    }
                    let mx: f64 = xs.iter().sum::<f64>() / 4.0;
                    let mf: f64 = fs.iter().sum::<f64>() / 4.0;
                    let mut vx: f64 =
                        xs.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / 4.0;
                    let vf: f64 = fs.iter().map(|v| (v - mf) * (v - mf)).sum::<f64>() / 4.0;
                    let cov: f64 = xs
                        .iter()
                        .zip(fs.iter())
                        .map(|(a, b)| (a - mx) * (b - mf))
                        .sum::<f64>()
                        / 4.0;
                    let mut g = cov / (vx + 1e-10);
                    let mut sv = vf - g * cov;
                    if vx < 1e-10 {
                        g = 0.0;
                        sv = vf;
                        vx = 0.0;
                    }
                    if vf < 1e-10 {
                        g = 0.0;
                        sv = 0.0;
                    }
                    if g < 0.0 {
                        sv = vf;
                        g = 0.0;
                    }
                    if sv < 1e-10 {
                        sv = 1e-10;
                    }
                    num += (1.0 + g * g * vx / (sv + 2.0)).ln();
                    den += (1.0 + vx / 2.0).ln();
                }
            }
        }
        num / den
    }

    fn oracle_viff(f: &Array2<f64>, a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        0.5 * (oracle_vif_one_source(a, f) + oracle_vif_one_source(b, f))
    }

    #[test]
    fn viff_identity_is_one() {
        let img = rand_img(1, 64, 64);
        let v = metric_viff(&img, &img, &img).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "got {v}");
    }

    #[test]
    fn viff_blur_loses_information() {
        let a = rand_img(2, 64, 64);
        // heavy blur: two pyramid smoothing passes upsampled back by pixel copy
        let mut blurred = a.clone();
        for _ in 0..2 {
            let down = pyr_down(&blurred);
            blurred = Array2::from_shape_fn(a.dim(), |(y, x)| down[[y / 2, x / 2]]);
        }
        let v = metric_viff(&blurred, &a, &a).unwrap();
        assert!(v < 1.0, "blurred fidelity should drop, got {v}");
    }

    #[test]
    fn viff_matches_independent_oracle() {
        for seed in 0..5 {
            let f = rand_img(seed + 10, 64, 64);
            let a = rand_img(seed + 20, 64, 64);
            let b = rand_img(seed + 30, 64, 64);
            let got = metric_viff(&f, &a, &b).unwrap();
            let expect = oracle_viff(&f, &a, &b);
            assert!(
                (got - expect).abs() < 1e-6,
                "seed {seed}: {got} vs {expect}"
            );
        }
    }

    #[test]
    fn viff_small_image_rejected() {
        let img = rand_img(3, 16, 16);
        assert!(matches!(
            metric_viff(&img, &img, &img),
            Err(Error::RejectedInput(_))
        ));
    }

    #[test]
    fn viff_flat_sources_degenerate() {
        let flat = Array2::from_elem((64, 64), 128.0);
        let f = rand_img(4, 64, 64);
        assert!(matches!(
            metric_viff(&f, &flat, &flat),
            Err(Error::DegenerateMetric { .. })
        ));
    }

    #[test]
    fn viff_odd_dims_supported() {
        let f = rand_img(5, 33, 47);
        let a = rand_img(6, 33, 47);
        let b = rand_img(7, 33, 47);
        assert!(metric_viff(&f, &a, &b).is_ok());
    }
}
