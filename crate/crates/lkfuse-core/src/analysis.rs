//! Analysis procedures: intensity histograms, feature-map local consistency,
//! and inference timing.

use crate::error::{Error, Result};
use crate::metrics::metric_sd;
use crate::model::{FeatureMap, FusionNet};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::time::Instant;

// ---------------------------------------------------------------------------
// histogram
// ---------------------------------------------------------------------------

/// Normalized intensity histogram with the standard-deviation annotation
/// (on the 0-255 scale, the scale such plots are usually annotated with).
#[derive(Clone, Debug, serde::Serialize)]
pub struct HistogramStats {
    pub bins: Vec<f64>,
    pub sd: f64,
    pub n_pixels: usize,
}

/// Histogram of a `[0,1]` grayscale image over `bins` uniform bins.
pub fn histogram_stats(img: &Array2<f64>, bins: usize) -> Result<HistogramStats> {
    if bins < 2 {
        return Err(Error::ContractViolation(format!(
            "histogram needs at least 2 bins, got {bins}"
        )));
    }
    if img.is_empty() {
        return Err(Error::EmptyInput("histogram_stats"));
    }
    let mut counts = vec![0usize; bins];
    for &v in img.iter() {
        let idx = ((v * bins as f64) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let n = img.len();
    let sd = metric_sd(&img.mapv(|v| v * 255.0))?;
    Ok(HistogramStats {
        bins: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        sd,
        n_pixels: n,
    })
}

impl HistogramStats {
    /// CSV: `bin_low,bin_high,fraction` rows plus a `#` annotation header
    /// (suppressed by `no_meta`).
    pub fn to_csv(&self, no_meta: bool) -> String {
        let mut out = String::new();
        if !no_meta {
            out.push_str(&format!("# sd: {:.6}\n# pixels: {}\n", self.sd, self.n_pixels));
        }
        out.push_str("bin_low,bin_high,fraction\n");
        let nb = self.bins.len() as f64;
        for (i, frac) in self.bins.iter().enumerate() {
            out.push_str(&format!(
                "{:.6},{:.6},{:.9}\n",
                i as f64 / nb,
                (i + 1) as f64 / nb,
                frac
            ));
        }
        out
    }

    /// Minimal self-contained SVG bar chart.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (640.0, 360.0, 24.0);
        let n = self.bins.len() as f64;
        let peak = self.bins.iter().cloned().fold(1e-12, f64::max);
        let bar_w = (w - 2.0 * pad) / n;
        let mut bars = String::new();
        for (i, frac) in self.bins.iter().enumerate() {
            let bh = (h - 2.0 * pad) * frac / peak;
            bars.push_str(&format!(
                r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4477aa"/>"##,
                pad + i as f64 * bar_w,
                h - pad - bh,
                bar_w.max(0.5),
                bh
            ));
        }
        format!(
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">
<rect width="{w}" height="{h}" fill="white"/>
{bars}
<text x="{pad}" y="16" font-family="monospace" font-size="12">intensity histogram, sd={sd:.3}</text>
</svg>
"#,
            sd = self.sd
        )
    }
}

// ---------------------------------------------------------------------------
// local consistency
// ---------------------------------------------------------------------------

/// Per-patch redundancy scores of a feature map: mean pairwise cosine
/// similarity of the per-pixel channel vectors inside each patch. Scores lie
/// in `[-1,1]`; higher means more redundant (more mutually aligned) features.
#[derive(Clone, Debug)]
pub struct ConsistencyMap {
    pub scores: Array2<f64>,
    pub patch: usize,
    pub layer: String,
}

/// Compute the consistency map of a single-sample feature map. Edge patches
/// that the patch size does not evenly cover are computed over their valid
/// pixels only. Zero vectors are handled by an epsilon-regularized cosine.
pub fn local_consistency(fm: &FeatureMap, patch: usize, layer: &str) -> Result<ConsistencyMap> {
    if patch == 0 {
        return Err(Error::ContractViolation("patch size must be positive".into()));
    }
    let [b, c, h, w] = fm.data.shape();
    if b != 1 {
        return Err(Error::ContractViolation(format!(
            "local consistency expects a single sample, got batch {b}"
        )));
    }
    let data = fm.data.data();
    let plane = h * w;
    let grid_h = h.div_ceil(patch);
    let grid_w = w.div_ceil(patch);
    let mut scores = Array2::zeros((grid_h, grid_w));
    const EPS: f64 = 1e-12;

    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let y1 = ((gy + 1) * patch).min(h);
            let x1 = ((gx + 1) * patch).min(w);
            let pixels: Vec<(usize, usize)> = (gy * patch..y1)
                .flat_map(|y| (gx * patch..x1).map(move |x| (y, x)))
                .collect();
            let m = pixels.len();
            if m < 2 {
                scores[[gy, gx]] = 1.0;
                continue;
            }
            // per-pixel channel vectors and their norms
            let vec_at = |y: usize, x: usize, ci: usize| data[ci * plane + y * w + x];
            let norms: Vec<f64> = pixels
                .iter()
                .map(|&(y, x)| {
                    (0..c)
                        .map(|ci| vec_at(y, x, ci).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            let mut acc = 0.0;
            for i in 0..m {
                let (yi, xi) = pixels[i];
                for j in (i + 1)..m {
                    let (yj, xj) = pixels[j];
                    let dot: f64 = (0..c).map(|ci| vec_at(yi, xi, ci) * vec_at(yj, xj, ci)).sum();
                    acc += dot / (norms[i] * norms[j]).max(EPS);
                }
            }
            scores[[gy, gx]] = acc / (m * (m - 1) / 2) as f64;
        }
    }
    Ok(ConsistencyMap {
        scores,
        patch,
        layer: layer.to_string(),
    })
}

/// Consistency of the initial-block activation for a source pair.
pub fn init_block_consistency(
    net: &FusionNet,
    pair: &crate::model::ImageTensor,
    patch: usize,
) -> Result<ConsistencyMap> {
    let fm = net.init_feature_map(pair)?;
    local_consistency(&fm, patch, "init")
}

impl ConsistencyMap {
    /// Text grid format:
    ///
    /// ```text
    /// consistency-map v1
    /// layer <name>
    /// patch <p>
    /// grid <rows> <cols>
    /// <row of %.6f scores>
    /// ...
    /// ```
    pub fn to_text_grid(&self) -> String {
        let (rows, cols) = self.scores.dim();
        let mut out = format!(
            "consistency-map v1\nlayer {}\npatch {}\ngrid {rows} {cols}\n",
            self.layer, self.patch
        );
        for r in 0..rows {
            let line: Vec<String> = (0..cols).map(|c| format!("{:.6}", self.scores[[r, c]])).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    /// Grayscale heatmap with scores mapped from [-1,1] to [0,1].
    pub fn to_heatmap(&self) -> Array2<f64> {
        self.scores.mapv(|s| (s + 1.0) / 2.0)
    }
}

// ---------------------------------------------------------------------------
// timing
// ---------------------------------------------------------------------------

/// Inference timing at one resolution: the measured span is model-call to
/// fused-result (padding, forward, crop-back), excluding image decoding and
/// disk IO. Warm-up iterations are excluded from the statistics.
#[derive(Clone, Debug, serde::Serialize)]
pub struct TimingReport {
    pub height: usize,
    pub width: usize,
    pub warmup: usize,
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub std_ms: f64,
}

pub fn bench_inference(
    net: &FusionNet,
    height: usize,
    width: usize,
    warmup: usize,
    reps: usize,
) -> Result<TimingReport> {
    if reps < 1 {
        return Err(Error::ContractViolation("reps must be >= 1".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(0xbe9c);
    let a = Array2::from_shape_fn((height, width), |_| rng.random::<f64>());
    let b = Array2::from_shape_fn((height, width), |_| rng.random::<f64>());
    let min_dim = net.config().min_input_dim();

    let run = || -> Result<f64> {
        let t0 = Instant::now();
        let (input, crop_back) = crate::data::pad_to_multiple(&a, &b, 16, min_dim)?;
        let fused = net.forward(&input)?;
        let restored = crop_back.apply(fused.tensor());
        let dt = t0.elapsed().as_secs_f64() * 1e3;
        debug_assert_eq!(restored.dim(), (height, width));
        std::hint::black_box(&restored);
        Ok(dt)
    };

    for _ in 0..warmup {
        run()?;
    }
    let mut samples_ms = Vec::with_capacity(reps);
    for _ in 0..reps {
        samples_ms.push(run()?);
    }
    let mean = samples_ms.iter().sum::<f64>() / reps as f64;
    let var = samples_ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / reps as f64;
    Ok(TimingReport {
        height,
        width,
        warmup,
        samples_ms,
        mean_ms: mean,
        std_ms: var.sqrt(),
    })
}

impl TimingReport {
    pub fn to_csv(&self, no_meta: bool) -> String {
        let mut out = String::new();
        if !no_meta {
            out.push_str(&format!(
                "# resolution: {}x{}\n# warmup: {}\n",
                self.width, self.height, self.warmup
            ));
        }
        out.push_str("rep,ms\n");
        for (i, ms) in self.samples_ms.iter().enumerate() {
            out.push_str(&format!("{i},{ms:.3}\n"));
        }
        out.push_str(&format!("mean,{:.3}\nstd,{:.3}\n", self.mean_ms, self.std_ms));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FeatureSource, ImageTensor, ModelConfig};
    use crate::tensor::Tensor;

    // ---- histogram ---------------------------------------------------------

    #[test]
    fn constant_image_single_bin_zero_sd() {
        let img = Array2::from_elem((16, 16), 0.4);
        let h = histogram_stats(&img, 64).unwrap();
        assert_eq!(h.sd, 0.0);
        let occupied: Vec<usize> = h
            .bins
            .iter()
            .enumerate()
            .filter(|(_, &f)| f > 0.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(occupied.len(), 1);
        assert!((h.bins[occupied[0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_ramp_is_near_flat() {
        let img = Array2::from_shape_fn((16, 16), |(y, x)| (y * 16 + x) as f64 / 255.0);
        let h = histogram_stats(&img, 256).unwrap();
        let nonzero = h.bins.iter().filter(|&&f| f > 0.0).count();
        assert_eq!(nonzero, 256);
        let (lo, hi) = h
            .bins
            .iter()
            .fold((f64::MAX, 0.0f64), |(lo, hi), &f| (lo.min(f), hi.max(f)));
        assert!((hi - lo).abs() < 1e-12, "uniform ramp should be flat");
    }

    #[test]
    fn histogram_sums_to_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let img = Array2::from_shape_fn((33, 17), |_| rng.random::<f64>());
        let h = histogram_stats(&img, 77).unwrap();
        assert!((h.bins.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_contract_checks() {
        let img = Array2::from_elem((4, 4), 0.5);
        assert!(histogram_stats(&img, 1).is_err());
        assert!(histogram_stats(&Array2::zeros((0, 0)), 8).is_err());
    }

    #[test]
    fn histogram_csv_shape() {
        let img = Array2::from_elem((4, 4), 0.5);
        let h = histogram_stats(&img, 4).unwrap();
        let csv = h.to_csv(false);
        assert!(csv.contains("# sd:"));
        assert_eq!(csv.lines().count(), 2 + 1 + 4);
        assert!(!h.to_csv(true).contains('#'));
        assert!(h.to_svg().starts_with("<svg"));
    }

    // ---- consistency ----------------------------------------------------------

    fn fm(data: Tensor) -> FeatureMap {
        FeatureMap::new(data, 0, FeatureSource::Encoder).unwrap()
    }

    #[test]
    fn constant_patch_scores_one() {
        let t = Tensor::from_fn([1, 3, 8, 8], |i| (i / 64) as f64 + 1.0);
        let cm = local_consistency(&fm(t), 4, "t").unwrap();
        assert_eq!(cm.scores.dim(), (2, 2));
        for s in cm.scores.iter() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_vectors_score_zero() {
        // two channels; pixels alternate between (1,0) and (0,1)
        let mut t = Tensor::zeros([1, 2, 2, 2]);
        // pixels (0,0) and (1,1) -> channel 0; pixels (0,1),(1,0) -> channel 1
        t.set(0, 0, 0, 0, 1.0);
        t.set(0, 1, 0, 1, 1.0);
        t.set(0, 1, 1, 0, 1.0);
        t.set(0, 0, 1, 1, 1.0);
        let cm = local_consistency(&fm(t), 2, "t").unwrap();
        // 6 pairs: 2 aligned (cos 1), 4 orthogonal (cos 0) -> mean 1/3
        assert!((cm.scores[[0, 0]] - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn matches_pairwise_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let t = Tensor::from_fn([1, 8, 16, 16], |_| rng.random::<f64>() - 0.5);
        let cm = local_consistency(&fm(t.clone()), 4, "t").unwrap();
        // independent double-loop oracle
        for gy in 0..4 {
            for gx in 0..4 {
                let mut vecs: Vec<Vec<f64>> = Vec::new();
                for y in gy * 4..(gy + 1) * 4 {
                    for x in gx * 4..(gx + 1) * 4 {
                        vecs.push((0..8).map(|c| t.at(0, c, y, x)).collect());
                    }
                }
                let mut acc = 0.0;
                let mut cnt = 0;
                for i in 0..vecs.len() {
                    for j in (i + 1)..vecs.len() {
                        let dot: f64 = vecs[i].iter().zip(&vecs[j]).map(|(a, b)| a * b).sum();
                        let ni: f64 = vecs[i].iter().map(|v| v * v).sum::<f64>().sqrt();
                        let nj: f64 = vecs[j].iter().map(|v| v * v).sum::<f64>().sqrt();
                        acc += dot / (ni * nj).max(1e-12);
                        cnt += 1;
                    }
                }
                let expect = acc / cnt as f64;
                assert!(
                    (cm.scores[[gy, gx]] - expect).abs() < 1e-9,
                    "patch ({gy},{gx})"
                );
            }
        }
    }

    #[test]
    fn scores_bounded_and_partial_patches_covered() {
        let mut rng = ChaCha12Rng::seed_from_u64(18);
        let t = Tensor::from_fn([1, 4, 10, 14], |_| rng.random::<f64>() - 0.5);
        let cm = local_consistency(&fm(t), 4, "t").unwrap();
        assert_eq!(cm.scores.dim(), (3, 4), "grid covers the full map");
        for s in cm.scores.iter() {
            assert!((-1.0..=1.0 + 1e-12).contains(s));
        }
    }

    #[test]
    fn zero_feature_map_is_safe() {
        let cm = local_consistency(&fm(Tensor::zeros([1, 4, 8, 8])), 4, "t").unwrap();
        for s in cm.scores.iter() {
            assert!(s.is_finite());
        }
    }

    #[test]
    fn flat_region_more_consistent_than_textured() {
        // default-config init block at random init: flat half vs noise half
        let net = FusionNet::new(&ModelConfig::default().with_desk_widths(), 31).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(32);
        let img = Tensor::from_fn([1, 2, 64, 64], |i| {
            let x = i % 64;
            if x < 32 {
                0.5
            } else {
                rng.random::<f64>()
            }
        });
        let pair = ImageTensor::new(img).unwrap();
        let cm = init_block_consistency(&net, &pair, 16).unwrap();
        // columns 0..1 flat, columns 2..3 textured (16px patches)
        let flat = (cm.scores[[1, 0]] + cm.scores[[1, 1]]) / 2.0;
        let tex = (cm.scores[[1, 2]] + cm.scores[[1, 3]]) / 2.0;
        assert!(
            flat > tex,
            "flat patches should be more redundant: flat {flat} vs textured {tex}"
        );
    }

    #[test]
    fn text_grid_format() {
        let t = Tensor::ones([1, 2, 4, 4]);
        let cm = local_consistency(&fm(t), 2, "init").unwrap();
        let text = cm.to_text_grid();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("consistency-map v1"));
        assert_eq!(lines.next(), Some("layer init"));
        assert_eq!(lines.next(), Some("patch 2"));
        assert_eq!(lines.next(), Some("grid 2 2"));
        assert_eq!(lines.next(), Some("1.000000 1.000000"));
    }

    // ---- timing -----------------------------------------------------------------

    #[test]
    fn timing_counts_and_stats() {
        let net = FusionNet::new(
            &ModelConfig {
                channel_widths: [2, 4, 8, 16],
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap();
        let report = bench_inference(&net, 64, 64, 3, 10).unwrap();
        assert_eq!(report.samples_ms.len(), 10);
        assert!(report.samples_ms.iter().all(|&ms| ms > 0.0));
        assert!(report.mean_ms > 0.0);
        let single = bench_inference(&net, 64, 64, 0, 1).unwrap();
        assert_eq!(single.mean_ms, single.samples_ms[0]);
        assert_eq!(single.std_ms, 0.0);
        assert!(bench_inference(&net, 64, 64, 0, 0).is_err());
    }
}
