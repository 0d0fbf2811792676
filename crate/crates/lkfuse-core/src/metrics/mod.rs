//! Fusion-quality metrics: SD, AG, SF, SCD, VIFF, SSIM.
//!
//! All metrics are computed on grayscale images on the 0-255 intensity
//! scale (the scale the reference literature reports; callers holding [0,1]
//! luminance should multiply by 255, which [`evaluate_pair`] does for them).
//! Degenerate cases (zero-variance difference images for SCD, fully flat
//! sources for VIFF) raise [`Error::DegenerateMetric`] rather than silently
//! returning 0; report rows record them as missing values.

mod viff;

pub use viff::metric_viff;

use crate::error::{Error, Result};
use crate::losses;
use crate::tensor::Tensor;
use ndarray::Array2;

/// Population standard deviation of pixel intensities.
pub fn metric_sd(f: &Array2<f64>) -> Result<f64> {
    if f.is_empty() {
        return Err(Error::EmptyInput("metric_sd"));
    }
    let n = f.len() as f64;
    let mean = f.sum() / n;
    let var = f.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(var.sqrt())
}

/// Average gradient: mean of `sqrt((dx^2 + dy^2)/2)` over the interior,
/// with forward differences.
pub fn metric_ag(f: &Array2<f64>) -> Result<f64> {
    let (h, w) = f.dim();
    if h < 2 || w < 2 {
        return Err(Error::RejectedInput(format!(
            "metric_ag needs at least 2x2 pixels, got {h}x{w}"
        )));
    }
    let mut acc = 0.0;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let dx = f[[y, x + 1]] - f[[y, x]];
            let dy = f[[y + 1, x]] - f[[y, x]];
            acc += ((dx * dx + dy * dy) / 2.0).sqrt();
        }
    }
    Ok(acc / ((h - 1) * (w - 1)) as f64)
}

/// Spatial frequency: `sqrt(RF^2 + CF^2)` from row- and column-neighbor
/// squared differences.
pub fn metric_sf(f: &Array2<f64>) -> Result<f64> {
    let (h, w) = f.dim();
    if h < 2 || w < 2 {
        return Err(Error::RejectedInput(format!(
            "metric_sf needs at least 2x2 pixels, got {h}x{w}"
        )));
    }
    let mut rf = 0.0;
    for y in 0..h {
        for x in 1..w {
            let d = f[[y, x]] - f[[y, x - 1]];
            rf += d * d;
        }
    }
    rf /= (h * (w - 1)) as f64;
    let mut cf = 0.0;
    for y in 1..h {
        for x in 0..w {
            let d = f[[y, x]] - f[[y - 1, x]];
            cf += d * d;
        }
    }
    cf /= ((h - 1) * w) as f64;
    Ok((rf + cf).sqrt())
}

const VAR_FLOOR: f64 = 1e-20;

fn pearson(x: &Array2<f64>, y: &Array2<f64>, metric: &'static str) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.sum() / n;
    let my = y.sum() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&a, &b) in x.iter().zip(y.iter()) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx / n < VAR_FLOOR || vy / n < VAR_FLOOR {
        return Err(Error::DegenerateMetric {
            metric,
            reason: "zero-variance operand in correlation".into(),
        });
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

/// Sum of correlations of differences: `r(F-B, A) + r(F-A, B)`.
pub fn metric_scd(f: &Array2<f64>, a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    check_same_dims(&[f, a, b], "metric_scd")?;
    let fa = f - a;
    let fb = f - b;
    Ok(pearson(&fb, a, "SCD")? + pearson(&fa, b, "SCD")?)
}

/// Fusion SSIM: mean of the two pairwise indices at dynamic range 255.
pub fn metric_ssim(f: &Array2<f64>, a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    check_same_dims(&[f, a, b], "metric_ssim")?;
    let ft = image_to_tensor(f);
    let at = image_to_tensor(a);
    let bt = image_to_tensor(b);
    let sa = losses::ssim_index(&at, &ft, 255.0)?;
    let sb = losses::ssim_index(&bt, &ft, 255.0)?;
    Ok(0.5 * (sa + sb))
}

pub(crate) fn check_same_dims(imgs: &[&Array2<f64>], context: &'static str) -> Result<()> {
    let dim = imgs[0].dim();
    for img in &imgs[1..] {
        if img.dim() != dim {
            return Err(Error::ShapeMismatch {
                context,
                expected: format!("{:?}", dim),
                got: format!("{:?}", img.dim()),
            });
        }
    }
    Ok(())
}

pub(crate) fn image_to_tensor(img: &Array2<f64>) -> Tensor {
    let (h, w) = img.dim();
    Tensor::new([1, 1, h, w], img.iter().copied().collect())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

/// Per-image metric values. `scd`/`viff` are `None` when the metric is
/// degenerate on that image.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub sd: f64,
    pub ag: f64,
    pub sf: f64,
    pub scd: Option<f64>,
    pub viff: Option<f64>,
    pub ssim: f64,
}

/// Column means over the rows; optional columns average their present values.
#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct MetricAggregate {
    pub sd: f64,
    pub ag: f64,
    pub sf: f64,
    pub scd: Option<f64>,
    pub viff: Option<f64>,
    pub ssim: f64,
}

/// Metric table in the fixed column order SD, AG, SF, SCD, VIFF, SSIM.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub dataset_tag: String,
    pub config_fingerprint: Option<String>,
    /// Intensity scale the metrics were computed on.
    pub intensity_scale: String,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn new(dataset_tag: impl Into<String>, config_fingerprint: Option<String>) -> Self {
        MetricReport {
            dataset_tag: dataset_tag.into(),
            config_fingerprint,
            intensity_scale: "0-255".into(),
            rows: Vec::new(),
        }
    }

    pub fn aggregate(&self) -> MetricAggregate {
        let n = self.rows.len() as f64;
        let mean_opt = |vals: Vec<f64>| {
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        MetricAggregate {
            sd: self.rows.iter().map(|r| r.sd).sum::<f64>() / n,
            ag: self.rows.iter().map(|r| r.ag).sum::<f64>() / n,
            sf: self.rows.iter().map(|r| r.sf).sum::<f64>() / n,
            scd: mean_opt(self.rows.iter().filter_map(|r| r.scd).collect()),
            viff: mean_opt(self.rows.iter().filter_map(|r| r.viff).collect()),
            ssim: self.rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        }
    }

    /// CSV with `#`-prefixed metadata header (suppressed by `no_meta`),
    /// one row per image and a final `mean` row.
    pub fn to_csv(&self, no_meta: bool) -> String {
        let mut out = String::new();
        if !no_meta {
            out.push_str(&format!("# dataset: {}\n", self.dataset_tag));
            if let Some(fp) = &self.config_fingerprint {
                out.push_str(&format!("# config-fingerprint: {fp}\n"));
            }
            out.push_str(&format!("# intensity-scale: {}\n", self.intensity_scale));
        }
        out.push_str("id,SD,AG,SF,SCD,VIFF,SSIM\n");
        let fmt_opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{},{},{:.6}\n",
                r.id,
                r.sd,
                r.ag,
                r.sf,
                fmt_opt(r.scd),
                fmt_opt(r.viff),
                r.ssim
            ));
        }
        if !self.rows.is_empty() {
            let agg = self.aggregate();
            out.push_str(&format!(
                "mean,{:.6},{:.6},{:.6},{},{},{:.6}\n",
                agg.sd,
                agg.ag,
                agg.sf,
                fmt_opt(agg.scd),
                fmt_opt(agg.viff),
                agg.ssim
            ));
        }
        out
    }

    pub fn to_json(&self, no_meta: bool) -> serde_json::Value {
        let mut v = serde_json::json!({
            "rows": self.rows,
            "aggregate": if self.rows.is_empty() {
                serde_json::Value::Null
            } else {
                serde_json::to_value(self.aggregate()).unwrap()
            },
        });
        if !no_meta {
            v["dataset"] = serde_json::Value::String(self.dataset_tag.clone());
            v["intensity_scale"] = serde_json::Value::String(self.intensity_scale.clone());
            if let Some(fp) = &self.config_fingerprint {
                v["config_fingerprint"] = serde_json::Value::String(fp.clone());
            }
        }
        v
    }
}

/// Compute all six metrics for one fused/source triple given as [0,1]
/// luminance images; values are rescaled to 0-255 internally.
///
/// SCD and VIFF degeneracies are recorded as missing values; any other
/// error propagates.
pub fn evaluate_pair(
    id: impl Into<String>,
    fused: &Array2<f64>,
    src_a: &Array2<f64>,
    src_b: &Array2<f64>,
) -> Result<MetricRow> {
    check_same_dims(&[fused, src_a, src_b], "evaluate_pair")?;
    let f = fused.mapv(|v| v * 255.0);
    let a = src_a.mapv(|v| v * 255.0);
    let b = src_b.mapv(|v| v * 255.0);
    let demote = |r: Result<f64>| -> Result<Option<f64>> {
        match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::DegenerateMetric { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };
    Ok(MetricRow {
        id: id.into(),
        sd: metric_sd(&f)?,
        ag: metric_ag(&f)?,
        sf: metric_sf(&f)?,
        scd: demote(metric_scd(&f, &a, &b))?,
        viff: demote(metric_viff(&f, &a, &b))?,
        ssim: metric_ssim(&f, &a, &b)?,
    })
}
