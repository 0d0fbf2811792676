//! Ablation-matrix harness: one training run per configuration row, all
//! evaluated on the same held-out set.

use super::{train, TrainConfig, TrainOutcome};
use crate::data::{fuse_pair, ImagePair};
use crate::error::Result;
use crate::metrics::{evaluate_pair, MetricReport};
use crate::model::{ablation_config, AblationRow, FusionNet, ModelConfig, DESK_CHANNEL_WIDTHS};
use std::path::Path;

pub struct AblationOutcome {
    pub row: AblationRow,
    /// Per-row isolation: one row failing does not abort the others.
    pub result: Result<MetricReport>,
}

/// Evaluate a trained network over an evaluation set.
pub fn evaluate_net(
    net: &FusionNet,
    eval_pairs: &[ImagePair],
    dataset_tag: &str,
) -> Result<MetricReport> {
    let mut report = MetricReport::new(dataset_tag, Some(net.config().fingerprint_hex()));
    for pair in eval_pairs {
        let fused = fuse_pair(net, pair)?;
        let b_y = pair.b_luminance()?;
        report
            .rows
            .push(evaluate_pair(pair.id.clone(), &fused.fused_y, &pair.modal_a, &b_y)?);
    }
    Ok(report)
}

/// Train one model per row with identical data and training settings, then
/// evaluate all six metrics on the shared eval set.
pub fn run_ablation_matrix(
    rows: &[AblationRow],
    train_cfg: &TrainConfig,
    train_pairs: &[ImagePair],
    eval_pairs: &[ImagePair],
    checkpoint_root: Option<&Path>,
) -> Vec<AblationOutcome> {
    rows.iter()
        .map(|&row| {
            let result = (|| {
                let mut model_cfg: ModelConfig = ablation_config(row);
                if train_cfg.desk_scale {
                    model_cfg.channel_widths = DESK_CHANNEL_WIDTHS;
                }
                let dir = checkpoint_root.map(|r| r.join(format!("row_{row}")));
                let TrainOutcome { net, .. } =
                    train(&model_cfg, train_cfg, train_pairs, dir.as_deref())?;
                evaluate_net(&net, eval_pairs, &format!("ablation-{row}"))
            })();
            AblationOutcome { row, result }
        })
        .collect()
}

/// Comparative table over rows: aggregate metrics in the standard column
/// order, one line per row; failed rows carry the error text.
pub fn ablation_table_csv(outcomes: &[AblationOutcome]) -> String {
    let mut out = String::from("row,SD,AG,SF,SCD,VIFF,SSIM\n");
    let fmt_opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    for o in outcomes {
        match &o.result {
            Ok(report) => {
                let a = report.aggregate();
                out.push_str(&format!(
                    "{},{:.6},{:.6},{:.6},{},{},{:.6}\n",
                    o.row,
                    a.sd,
                    a.ag,
                    a.sf,
                    fmt_opt(a.scd),
                    fmt_opt(a.viff),
                    a.ssim
                ));
            }
            Err(e) => out.push_str(&format!("{},error: {e}\n", o.row)),
        }
    }
    out
}
