//! Deterministic training loop with checkpointing.

mod ablation;
mod adam;
mod checkpoint;

pub use ablation::{ablation_table_csv, run_ablation_matrix, AblationOutcome};
pub use adam::{Adam, AdamState};
pub use checkpoint::{joint_fingerprint, load_checkpoint, save_checkpoint, Checkpoint};

use crate::data::{ImagePair, PreparedPairs};
use crate::error::{Error, Result};
use crate::losses::{loss_total_var, LossBreakdown};
use crate::model::{Forward, FusionNet, ModelConfig, ParamId};
use crate::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Gradient-norm cap; purely a NaN guard, logged when triggered.
pub const GRAD_CLIP_NORM: f64 = 10.0;
/// Epoch count used when `desk_scale` is set.
pub const DESK_EPOCHS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum OptimizerKind {
    Adam,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub crop: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Persist a checkpoint every N epochs (0 = only the final one).
    pub checkpoint_every: usize,
    /// Shrink the run for CI: caps epochs at [`DESK_EPOCHS`]; pair it with
    /// desk channel widths on the model side.
    pub desk_scale: bool,
    /// Hard cap on optimizer steps (useful when an experiment is specified
    /// in steps rather than epochs).
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            lr: 1e-4,
            batch: 32,
            crop: 64,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            checkpoint_every: 0,
            desk_scale: false,
            max_steps: None,
        }
    }
}

pub fn default_train_config() -> TrainConfig {
    TrainConfig::default()
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::ContractViolation(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.epochs == 0 {
            return Err(Error::ContractViolation("epochs must be >= 1".into()));
        }
        if self.batch == 0 || self.crop == 0 {
            return Err(Error::ContractViolation(
                "batch and crop must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn effective_epochs(&self) -> usize {
        if self.desk_scale {
            self.epochs.min(DESK_EPOCHS)
        } else {
            self.epochs
        }
    }

    /// Nominal random crops per source pair: `(256/crop)^2`, at least 1.
    pub fn patches_per_pair(&self) -> usize {
        ((256 / self.crop.max(1)).max(1)).pow(2)
    }

    pub fn steps_per_epoch(&self, n_pairs: usize) -> usize {
        (n_pairs * self.patches_per_pair()).div_ceil(self.batch).max(1)
    }

    pub fn to_kv_string(&self) -> String {
        format!(
            "epochs = {}\nlr = {}\nbatch = {}\ncrop = {}\nseed = {}\noptimizer = adam\n\
             checkpoint_every = {}\ndesk_scale = {}\nmax_steps = {}\n",
            self.epochs,
            self.lr,
            self.batch,
            self.crop,
            self.seed,
            self.checkpoint_every,
            self.desk_scale,
            self.max_steps.map_or("none".into(), |v| v.to_string()),
        )
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let int = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad integer for {key}: {v}")))
            };
            match key {
                "epochs" => cfg.epochs = int(value)?,
                "lr" => {
                    cfg.lr = value
                        .parse()
                        .map_err(|_| Error::Format(format!("bad lr: {value}")))?
                }
                "batch" => cfg.batch = int(value)?,
                "crop" => cfg.crop = int(value)?,
                "seed" => {
                    cfg.seed = value
                        .parse()
                        .map_err(|_| Error::Format(format!("bad seed: {value}")))?
                }
                "optimizer" => {
                    if value != "adam" {
                        return Err(Error::Format(format!("unknown optimizer {value}")));
                    }
                }
                "checkpoint_every" => cfg.checkpoint_every = int(value)?,
                "desk_scale" => {
                    cfg.desk_scale = value
                        .parse()
                        .map_err(|_| Error::Format(format!("bad desk_scale: {value}")))?
                }
                "max_steps" => {
                    cfg.max_steps = if value == "none" {
                        None
                    } else {
                        Some(int(value)?)
                    }
                }
                _ => return Err(Error::Format(format!("unknown key {key}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub wall_ms: f64,
    pub grad_clipped: bool,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_total: f64,
    pub steps: usize,
    pub clipped_steps: usize,
}

/// Header + per-step records + per-epoch aggregates; serializes as
/// line-delimited JSON.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TrainLog {
    pub model_config: String,
    pub train_config: String,
    pub fingerprint: String,
    pub n_pairs: usize,
    pub patches_per_pair: usize,
    pub steps_per_epoch: usize,
    /// How an epoch is defined for this run.
    pub epoch_definition: String,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// Line-delimited JSON: one `header` object, then `step` and `epoch`
    /// records in order. `no_meta` drops the header line and the wall-clock
    /// fields, making the output byte-reproducible for a fixed seed.
    pub fn to_jsonl(&self, no_meta: bool) -> String {
        let mut out = String::new();
        if !no_meta {
            let header = serde_json::json!({
                "type": "header",
                "fingerprint": self.fingerprint,
                "model_config": self.model_config,
                "train_config": self.train_config,
                "n_pairs": self.n_pairs,
                "patches_per_pair": self.patches_per_pair,
                "steps_per_epoch": self.steps_per_epoch,
                "epoch_definition": self.epoch_definition,
            });
            out.push_str(&header.to_string());
            out.push('\n');
        }
        for s in &self.steps {
            let mut v = serde_json::json!({
                "type": "step",
                "step": s.step,
                "loss": s.loss,
                "grad_clipped": s.grad_clipped,
            });
            if !no_meta {
                v["wall_ms"] = serde_json::json!(s.wall_ms);
            }
            out.push_str(&v.to_string());
            out.push('\n');
        }
        for e in &self.epochs {
            let mut v = serde_json::to_value(e).unwrap();
            v["type"] = "epoch".into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out
    }
}

pub struct TrainOutcome {
    pub net: FusionNet,
    pub log: TrainLog,
    pub final_checkpoint: Option<PathBuf>,
}

/// Train a fresh model on the given pairs.
///
/// Deterministic for a fixed `(seed, data, config)` triple: parameter init,
/// batch sampling and optimizer updates all derive from the seed with fixed
/// ordering. A non-finite loss aborts with the offending step, after writing
/// a `last_good.lkc` checkpoint when a checkpoint directory is available.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    pairs: &[ImagePair],
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let prepared = PreparedPairs::from_pairs(pairs)?;
    let mut net = FusionNet::new(model_cfg, train_cfg.seed)?;
    let mut optimizer = Adam::new(train_cfg.lr);

    let steps_per_epoch = train_cfg.steps_per_epoch(prepared.len());
    let epochs = train_cfg.effective_epochs();
    let mut total_steps = epochs * steps_per_epoch;
    if let Some(cap) = train_cfg.max_steps {
        total_steps = total_steps.min(cap);
    }

    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut log = TrainLog {
        model_config: model_cfg.to_kv_string(),
        train_config: train_cfg.to_kv_string(),
        fingerprint: joint_fingerprint(model_cfg, train_cfg),
        n_pairs: prepared.len(),
        patches_per_pair: train_cfg.patches_per_pair(),
        steps_per_epoch,
        epoch_definition: format!(
            "one epoch = ceil(n_pairs * (256/crop)^2 / batch) = {steps_per_epoch} sampled batches"
        ),
        steps: Vec::with_capacity(total_steps),
        epochs: Vec::new(),
    };

    let mut batch_rng = ChaCha12Rng::seed_from_u64(train_cfg.seed.wrapping_add(0x9e3779b97f4a7c15));
    let mut epoch_losses: Vec<f64> = Vec::new();
    let mut epoch_clipped = 0usize;

    for step in 1..=total_steps {
        let t0 = Instant::now();
        let batch = prepared.sample_batch(train_cfg.crop, train_cfg.batch, &mut batch_rng)?;

        let tape = Tape::new();
        let dropout_rng =
            ChaCha12Rng::seed_from_u64(train_cfg.seed.wrapping_add(step as u64).wrapping_mul(0x2545F4914F6CDD1D));
        let ctx = Forward::training(&tape, net.params(), dropout_rng);
        let input = tape.leaf(batch.tensor().clone());
        let fused = net.forward_on(&ctx, input)?;
        let src_a = input.slice_channels(0, 1);
        let src_b = input.slice_channels(1, 1);
        let terms = loss_total_var(fused, src_a, src_b)?;
        let breakdown = terms.breakdown();

        if !breakdown.l_total.is_finite() {
            if let Some(dir) = checkpoint_dir {
                let _ = save_checkpoint(
                    &dir.join("last_good.lkc"),
                    &net,
                    train_cfg,
                    Some(&optimizer.state(net.params())),
                );
            }
            return Err(Error::NumericFailure {
                step,
                batch_id: step as u64,
                detail: format!(
                    "non-finite loss (ssim {}, int {}, grad {})",
                    breakdown.l_ssim, breakdown.l_int, breakdown.l_grad
                ),
            });
        }

        let grads = tape.backward(terms.total);
        let mut param_grads: Vec<(ParamId, Tensor)> = Vec::new();
        for (id, var) in ctx.bindings() {
            if net.params().entry(id).trainable {
                param_grads.push((id, grads.wrt(var)));
            }
        }

        // global-norm clip, purely a NaN guard
        let norm_sq: f64 = param_grads
            .iter()
            .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum();
        let norm = norm_sq.sqrt();
        let clipped = norm > GRAD_CLIP_NORM;
        if clipped {
            let scale = GRAD_CLIP_NORM / norm;
            for (_, g) in &mut param_grads {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
        }
        if !norm.is_finite() {
            if let Some(dir) = checkpoint_dir {
                let _ = save_checkpoint(
                    &dir.join("last_good.lkc"),
                    &net,
                    train_cfg,
                    Some(&optimizer.state(net.params())),
                );
            }
            return Err(Error::NumericFailure {
                step,
                batch_id: step as u64,
                detail: "non-finite gradient norm".into(),
            });
        }

        let buffer_updates = ctx.take_buffer_updates();
        drop(ctx);
        drop(tape);
        optimizer.step(net.params_mut(), &param_grads);
        for (id, value) in buffer_updates {
            net.params_mut().set(id, value);
        }

        log.steps.push(StepRecord {
            step,
            loss: breakdown,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            grad_clipped: clipped,
        });
        epoch_losses.push(breakdown.l_total);
        epoch_clipped += clipped as usize;

        if step % steps_per_epoch == 0 || step == total_steps {
            let epoch = step.div_ceil(steps_per_epoch);
            log.epochs.push(EpochRecord {
                epoch,
                mean_total: epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64,
                steps: epoch_losses.len(),
                clipped_steps: epoch_clipped,
            });
            epoch_losses.clear();
            epoch_clipped = 0;
            if let Some(dir) = checkpoint_dir {
                if train_cfg.checkpoint_every > 0 && epoch % train_cfg.checkpoint_every == 0 {
                    save_checkpoint(
                        &dir.join(format!("epoch{epoch:05}.lkc")),
                        &net,
                        train_cfg,
                        Some(&optimizer.state(net.params())),
                    )?;
                }
            }
        }
    }

    let final_checkpoint = if let Some(dir) = checkpoint_dir {
        let path = dir.join("final.lkc");
        save_checkpoint(&path, &net, train_cfg, Some(&optimizer.state(net.params())))?;
        Some(path)
    } else {
        None
    };

    Ok(TrainOutcome {
        net,
        log,
        final_checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_pairs;
    use crate::model::DESK_CHANNEL_WIDTHS;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            channel_widths: DESK_CHANNEL_WIDTHS,
            ..ModelConfig::default()
        }
    }

    fn tiny_train(steps: usize) -> TrainConfig {
        TrainConfig {
            batch: 2,
            crop: 64,
            seed: 11,
            desk_scale: true,
            max_steps: Some(steps),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_match_protocol() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.epochs, 1000);
        assert_eq!(cfg.lr, 1e-4);
        assert_eq!(cfg.batch, 32);
        assert_eq!(cfg.crop, 64);
        assert_eq!(cfg.optimizer, OptimizerKind::Adam);
        assert_eq!(cfg.patches_per_pair(), 16);
    }

    #[test]
    fn kv_round_trip() {
        let cfg = tiny_train(200);
        let back = TrainConfig::from_kv_str(&cfg.to_kv_string()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn short_run_records_losses_and_changes_params() {
        let pairs = synthetic_pairs(2, 64, 5);
        let outcome = train(&tiny_model(), &tiny_train(3), &pairs, None).unwrap();
        assert_eq!(outcome.log.steps.len(), 3);
        assert!(outcome.log.steps.iter().all(|s| s.loss.l_total.is_finite()));
        // one step must strictly change at least one parameter
        let fresh = FusionNet::new(&tiny_model(), 11).unwrap();
        let changed = outcome
            .net
            .params()
            .iter()
            .zip(fresh.params().iter())
            .any(|((_, a), (_, b))| a.value != b.value);
        assert!(changed);
    }

    #[test]
    fn seed_determinism_bit_identical_logs() {
        let pairs = synthetic_pairs(2, 64, 6);
        let a = train(&tiny_model(), &tiny_train(3), &pairs, None).unwrap();
        let b = train(&tiny_model(), &tiny_train(3), &pairs, None).unwrap();
        for (sa, sb) in a.log.steps.iter().zip(b.log.steps.iter()) {
            assert_eq!(sa.loss.l_total.to_bits(), sb.loss.l_total.to_bits());
            assert_eq!(sa.loss.l_ssim.to_bits(), sb.loss.l_ssim.to_bits());
        }
    }

    #[test]
    fn losses_finite_for_all_ablation_rows_at_init() {
        use crate::model::{ablation_config, AblationRow};
        let pairs = synthetic_pairs(2, 64, 7);
        for row in AblationRow::ALL {
            let cfg = ModelConfig {
                channel_widths: DESK_CHANNEL_WIDTHS,
                ..ablation_config(row)
            };
            let outcome = train(&cfg, &tiny_train(1), &pairs, None).unwrap();
            assert!(
                outcome.log.steps[0].loss.l_total.is_finite(),
                "row {row} produced a non-finite first loss"
            );
        }
    }

    #[test]
    fn checkpoints_written_on_schedule() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = synthetic_pairs(2, 64, 8);
        let cfg = TrainConfig {
            checkpoint_every: 1,
            epochs: 2,
            desk_scale: false,
            batch: 2,
            max_steps: None,
            seed: 1,
            ..TrainConfig::default()
        };
        let outcome = train(&tiny_model(), &cfg, &pairs, Some(dir.path())).unwrap();
        assert!(outcome.final_checkpoint.as_ref().unwrap().exists());
        assert!(dir.path().join("epoch00001.lkc").exists());
        assert!(dir.path().join("epoch00002.lkc").exists());
        // resume the trained net from disk and compare a forward pass
        let ck = load_checkpoint(outcome.final_checkpoint.as_ref().unwrap()).unwrap();
        let rebuilt = ck.build_net().unwrap();
        let probe = crate::data::sample_training_batch(&pairs, 64, 1, 99).unwrap();
        assert_eq!(
            outcome.net.forward(&probe).unwrap().tensor(),
            rebuilt.forward(&probe).unwrap().tensor()
        );
    }

    #[test]
    fn jsonl_log_has_header_and_steps() {
        let pairs = synthetic_pairs(2, 64, 9);
        let outcome = train(&tiny_model(), &tiny_train(2), &pairs, None).unwrap();
        let text = outcome.log.to_jsonl(false);
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].contains("\"type\":\"header\""));
        assert!(lines[0].contains("epoch_definition"));
        assert!(lines.iter().filter(|l| l.contains("\"type\":\"step\"")).count() == 2);
        let bare = outcome.log.to_jsonl(true);
        assert!(!bare.contains("header"));
    }
}
