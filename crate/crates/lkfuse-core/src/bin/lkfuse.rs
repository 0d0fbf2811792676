//! Command-line interface for training, fusing, evaluating and analyzing
//! fusion models.
//!
//! Exit codes: 0 success, 2 usage, 3 IO/format, 4 rejected input or contract
//! violation, 5 config-fingerprint mismatch, 6 degenerate metric, 7 numeric
//! failure during training. Failures print a single machine-parsable line:
//! `error code=<n> kind=<kind> msg="..."`.

use clap::{Args, Parser, Subcommand};
use lkfuse_core::analysis;
use lkfuse_core::data::{self, ImagePair, TaskKind};
use lkfuse_core::error::{Error, Result};
use lkfuse_core::metrics;
use lkfuse_core::model::{ablation_config, AblationRow, FusionNet, ModelConfig};
use lkfuse_core::train::{self, TrainConfig};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "lkfuse",
    version,
    about = "Large-kernel UNet multimodal image fusion: train, fuse, evaluate, analyze"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a fusion model
    Train(TrainArgs),
    /// Fuse directories of aligned source pairs with a trained checkpoint
    Fuse(FuseArgs),
    /// Compute the six-metric report for fused images
    Eval(EvalArgs),
    /// Train and evaluate ablation-matrix rows under identical settings
    Ablate(AblateArgs),
    /// Intensity histogram with SD annotation
    AnalyzeHist(HistArgs),
    /// Feature-map local-consistency grid
    AnalyzeConsistency(ConsistencyArgs),
    /// Inference timing benchmark
    Bench(BenchArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Directory of first-modality images (grayscale)
    #[arg(long)]
    src_a: Option<PathBuf>,
    /// Directory of second-modality images (grayscale or color)
    #[arg(long)]
    src_b: Option<PathBuf>,
    /// Two-column manifest of relative image paths
    #[arg(long, conflicts_with_all = ["src_a", "src_b"])]
    manifest: Option<PathBuf>,
    /// Generate N deterministic synthetic pairs instead of loading images
    #[arg(long, conflicts_with_all = ["src_a", "src_b", "manifest"])]
    synthetic: Option<usize>,
    /// Edge length of synthetic pairs
    #[arg(long, default_value_t = 64)]
    synthetic_size: usize,
    /// Seed for synthetic pair generation
    #[arg(long, default_value_t = 7)]
    synthetic_seed: u64,
    /// Task tag carried as provenance
    #[arg(long, value_parser = parse_task, default_value = "mif")]
    task: TaskKind,
}

fn parse_task(s: &str) -> std::result::Result<TaskKind, String> {
    match s.to_ascii_lowercase().as_str() {
        "mif" => Ok(TaskKind::Mif),
        "ivif" => Ok(TaskKind::Ivif),
        other => Err(format!("unknown task {other}, expected mif or ivif")),
    }
}

impl DataArgs {
    fn load(&self) -> Result<Vec<ImagePair>> {
        if let Some(n) = self.synthetic {
            return Ok(data::synthetic_pairs(n, self.synthetic_size, self.synthetic_seed));
        }
        if let Some(manifest) = &self.manifest {
            return data::load_manifest(manifest, self.task);
        }
        match (&self.src_a, &self.src_b) {
            (Some(a), Some(b)) => data::load_pair_directories(a, b, self.task),
            _ => Err(Error::ContractViolation(
                "provide --src-a/--src-b, --manifest, or --synthetic".into(),
            )),
        }
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Model config file (flat key = value)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ablation row to use as the model configuration
    #[arg(long, conflicts_with = "config")]
    row: Option<String>,
    /// Desk-scale preset: small channel widths and capped epochs
    #[arg(long)]
    desk_scale: bool,
}

impl ModelArgs {
    fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = if let Some(path) = &self.config {
            ModelConfig::from_kv_str(&std::fs::read_to_string(path)?)?
        } else if let Some(tag) = &self.row {
            ablation_config(tag.parse::<AblationRow>()?)
        } else {
            ModelConfig::default()
        };
        if self.desk_scale {
            cfg = cfg.with_desk_widths();
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Output directory for checkpoints and the training log
    #[arg(long)]
    out_dir: PathBuf,
    /// Write the (synthetic) training pairs to <dir>/a and <dir>/b as PNG
    #[arg(long)]
    dump_pairs: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 64)]
    crop: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Persist a checkpoint every N epochs (0 = final only)
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Hard cap on optimizer steps
    #[arg(long)]
    max_steps: Option<usize>,
    /// Omit volatile metadata from emitted files
    #[arg(long)]
    no_meta: bool,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory for fused PNGs
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of fused images (<pair-id>.png)
    #[arg(long)]
    fused: PathBuf,
    #[arg(long)]
    src_a: PathBuf,
    #[arg(long)]
    src_b: PathBuf,
    #[arg(long, value_parser = parse_task, default_value = "mif")]
    task: TaskKind,
    /// CSV report path
    #[arg(long)]
    out: PathBuf,
    /// Also write a JSON report
    #[arg(long)]
    json: Option<PathBuf>,
    /// Dataset tag recorded in the report header
    #[arg(long, default_value = "eval")]
    tag: String,
    /// Fingerprint to record (e.g. from the checkpoint used to fuse)
    #[arg(long)]
    fingerprint: Option<String>,
    #[arg(long)]
    no_meta: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// Comma-separated row tags (I..VI, Ours); defaults to all
    #[arg(long, default_value = "I,II,III,IV,V,VI,Ours")]
    rows: String,
    #[command(flatten)]
    data: DataArgs,
    /// Separate eval set directories (defaults to the training pairs)
    #[arg(long, requires = "eval_b")]
    eval_a: Option<PathBuf>,
    #[arg(long, requires = "eval_a")]
    eval_b: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Desk-scale preset for every row
    #[arg(long)]
    desk_scale: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 64)]
    crop: usize,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Keep per-row checkpoints
    #[arg(long)]
    keep_checkpoints: bool,
    #[arg(long)]
    no_meta: bool,
}

#[derive(Args)]
struct HistArgs {
    /// Input image (loaded as grayscale)
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 256)]
    bins: usize,
    #[arg(long)]
    out: PathBuf,
    /// Optional SVG bar chart
    #[arg(long)]
    plot: Option<PathBuf>,
    #[arg(long)]
    no_meta: bool,
}

#[derive(Args)]
struct ConsistencyArgs {
    /// Checkpoint to analyze; omit for a randomly initialized model
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Seed for the randomly initialized model
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// First-modality image
    #[arg(long)]
    src_a: PathBuf,
    /// Second-modality image
    #[arg(long)]
    src_b: PathBuf,
    #[arg(long, default_value_t = 16)]
    patch: usize,
    /// Output text grid
    #[arg(long)]
    out: PathBuf,
    /// Optional grayscale heatmap PNG
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Checkpoint to benchmark; omit for a randomly initialized model
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated WxH resolutions
    #[arg(long, default_value = "256x256,640x480")]
    resolutions: String,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    no_meta: bool,
}

fn check_device() -> Result<()> {
    match std::env::var("LKFUSE_DEVICE") {
        Err(_) => Ok(()),
        Ok(v) if v.eq_ignore_ascii_case("cpu") || v.is_empty() => Ok(()),
        Ok(v) => Err(Error::ContractViolation(format!(
            "LKFUSE_DEVICE={v} is not available; this build runs on cpu only"
        ))),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn load_net(checkpoint: Option<&Path>, model: &ModelArgs, seed: u64) -> Result<FusionNet> {
    match checkpoint {
        Some(path) => train::load_checkpoint(path)?.build_net(),
        None => FusionNet::new(&model.model_config()?, seed),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let pairs = args.data.load()?;
    if let Some(dump) = &args.dump_pairs {
        dump_pairs(dump, &pairs)?;
    }
    let model_cfg = args.model.model_config()?;
    let train_cfg = TrainConfig {
        epochs: args.epochs,
        lr: args.lr,
        batch: args.batch,
        crop: args.crop,
        seed: args.seed,
        optimizer: train::OptimizerKind::Adam,
        checkpoint_every: args.checkpoint_every,
        desk_scale: args.model.desk_scale,
        max_steps: args.max_steps,
    };
    let outcome = train::train(&model_cfg, &train_cfg, &pairs, Some(&args.out_dir))?;
    write_file(
        &args.out_dir.join("train_log.jsonl"),
        &outcome.log.to_jsonl(args.no_meta),
    )?;
    let last = outcome.log.steps.last();
    println!(
        "trained {} steps; final loss {:.6}; checkpoint {}",
        outcome.log.steps.len(),
        last.map_or(f64::NAN, |s| s.loss.l_total),
        outcome
            .final_checkpoint
            .as_deref()
            .unwrap_or(Path::new("-"))
            .display()
    );
    Ok(())
}

fn dump_pairs(root: &Path, pairs: &[ImagePair]) -> Result<()> {
    let (da, db) = (root.join("a"), root.join("b"));
    std::fs::create_dir_all(&da)?;
    std::fs::create_dir_all(&db)?;
    for p in pairs {
        data::save_gray_image(&da.join(format!("{}.png", p.id)), &p.modal_a)?;
        match &p.modal_b {
            data::ModalImage::Gray(g) => {
                data::save_gray_image(&db.join(format!("{}.png", p.id)), g)?
            }
            data::ModalImage::Color(c) => {
                data::save_color_image(&db.join(format!("{}.png", p.id)), c)?
            }
        }
    }
    Ok(())
}

fn cmd_fuse(args: FuseArgs) -> Result<()> {
    let net = train::load_checkpoint(&args.checkpoint)?.build_net()?;
    let pairs = args.data.load()?;
    std::fs::create_dir_all(&args.out)?;
    for pair in &pairs {
        let fused = data::fuse_pair(&net, pair)?;
        data::save_gray_image(&args.out.join(format!("{}.png", pair.id)), &fused.fused_y)?;
        if let Some(color) = &fused.color {
            data::save_color_image(&args.out.join(format!("{}_color.png", pair.id)), color)?;
        }
    }
    println!("fused {} pairs into {}", pairs.len(), args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let pairs = data::load_pair_directories(&args.src_a, &args.src_b, args.task)?;
    let mut report = metrics::MetricReport::new(args.tag.clone(), args.fingerprint.clone());
    for pair in &pairs {
        let fused_path = args.fused.join(format!("{}.png", pair.id));
        if !fused_path.exists() {
            return Err(Error::Format(format!(
                "missing fused image {}",
                fused_path.display()
            )));
        }
        let fused = data::load_gray_image(&fused_path)?;
        let b_y = pair.b_luminance()?;
        report
            .rows
            .push(metrics::evaluate_pair(pair.id.clone(), &fused, &pair.modal_a, &b_y)?);
    }
    write_file(&args.out, &report.to_csv(args.no_meta))?;
    if let Some(json) = &args.json {
        write_file(json, &report.to_json(args.no_meta).to_string())?;
    }
    let agg = report.aggregate();
    println!(
        "evaluated {} pairs: SD {:.3} AG {:.3} SF {:.3} SCD {} VIFF {} SSIM {:.3}",
        report.rows.len(),
        agg.sd,
        agg.ag,
        agg.sf,
        agg.scd.map_or("-".into(), |v| format!("{v:.3}")),
        agg.viff.map_or("-".into(), |v| format!("{v:.3}")),
        agg.ssim
    );
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let rows: Vec<AblationRow> = args
        .rows
        .split(',')
        .map(|t| t.parse::<AblationRow>())
        .collect::<Result<_>>()?;
    let train_pairs = args.data.load()?;
    let eval_pairs = match (&args.eval_a, &args.eval_b) {
        (Some(a), Some(b)) => data::load_pair_directories(a, b, args.data.task)?,
        _ => train_pairs.clone(),
    };
    let train_cfg = TrainConfig {
        epochs: args.epochs,
        batch: args.batch,
        crop: args.crop,
        seed: args.seed,
        desk_scale: args.desk_scale,
        max_steps: args.max_steps,
        ..TrainConfig::default()
    };
    std::fs::create_dir_all(&args.out_dir)?;
    let ckpt_root = args.keep_checkpoints.then_some(args.out_dir.as_path());
    let outcomes = train::run_ablation_matrix(&rows, &train_cfg, &train_pairs, &eval_pairs, ckpt_root);

    write_file(
        &args.out_dir.join("ablation_report.csv"),
        &train::ablation_table_csv(&outcomes),
    )?;
    let mut json_rows = Vec::new();
    for o in &outcomes {
        match &o.result {
            Ok(report) => json_rows.push(serde_json::json!({
                "row": o.row.to_string(),
                "report": report.to_json(args.no_meta),
            })),
            Err(e) => json_rows.push(serde_json::json!({
                "row": o.row.to_string(),
                "error": e.to_string(),
            })),
        }
    }
    write_file(
        &args.out_dir.join("ablation_report.json"),
        &serde_json::Value::Array(json_rows).to_string(),
    )?;
    for o in &outcomes {
        match &o.result {
            Ok(r) => {
                let a = r.aggregate();
                println!(
                    "row {:>4}: SD {:.3} AG {:.3} SF {:.3} SCD {} VIFF {} SSIM {:.3}",
                    o.row.to_string(),
                    a.sd,
                    a.ag,
                    a.sf,
                    a.scd.map_or("-".into(), |v| format!("{v:.3}")),
                    a.viff.map_or("-".into(), |v| format!("{v:.3}")),
                    a.ssim
                );
            }
            Err(e) => println!("row {:>4}: failed: {e}", o.row.to_string()),
        }
    }
    // any row failure makes the command fail after emitting the report
    if let Some(bad) = outcomes.iter().find(|o| o.result.is_err()) {
        return Err(Error::ContractViolation(format!(
            "ablation row {} failed (see report)",
            bad.row
        )));
    }
    Ok(())
}

fn cmd_hist(args: HistArgs) -> Result<()> {
    let img = data::load_gray_image(&args.input)?;
    let stats = analysis::histogram_stats(&img, args.bins)?;
    write_file(&args.out, &stats.to_csv(args.no_meta))?;
    if let Some(plot) = &args.plot {
        write_file(plot, &stats.to_svg())?;
    }
    println!("histogram: {} bins, sd {:.3}", args.bins, stats.sd);
    Ok(())
}

fn cmd_consistency(args: ConsistencyArgs) -> Result<()> {
    let net = load_net(args.checkpoint.as_deref(), &args.model, args.seed)?;
    let a = data::load_gray_image(&args.src_a)?;
    let b = data::load_modal_image(&args.src_b)?.luminance()?;
    let min_dim = net.config().min_input_dim();
    let (input, _) = data::pad_to_multiple(&a, &b, 16, min_dim)?;
    let map = analysis::init_block_consistency(&net, &input, args.patch)?;
    write_file(&args.out, &map.to_text_grid())?;
    if let Some(plot) = &args.plot {
        if let Some(parent) = plot.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        data::save_gray_image(plot, &map.to_heatmap())?;
    }
    let (rows, cols) = map.scores.dim();
    println!("consistency grid {rows}x{cols} written to {}", args.out.display());
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let net = load_net(args.checkpoint.as_deref(), &args.model, args.seed)?;
    let mut reports = Vec::new();
    for spec in args.resolutions.split(',') {
        let (w, h) = spec
            .trim()
            .split_once('x')
            .ok_or_else(|| Error::ContractViolation(format!("bad resolution {spec}, expected WxH")))?;
        let (w, h): (usize, usize) = (
            w.parse()
                .map_err(|_| Error::ContractViolation(format!("bad width {w}")))?,
            h.parse()
                .map_err(|_| Error::ContractViolation(format!("bad height {h}")))?,
        );
        let report = analysis::bench_inference(&net, h, w, args.warmup, args.reps)?;
        println!(
            "{}x{}: mean {:.2} ms, std {:.2} ms over {} reps",
            w, h, report.mean_ms, report.std_ms, args.reps
        );
        reports.push(report);
    }
    let mut csv = String::new();
    for r in &reports {
        csv.push_str(&r.to_csv(args.no_meta));
    }
    write_file(&args.out, &csv)?;
    if let Some(json) = &args.json {
        write_file(json, &serde_json::to_string(&reports).unwrap())?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    check_device()?;
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Fuse(args) => cmd_fuse(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::AnalyzeHist(args) => cmd_hist(args),
        Command::AnalyzeConsistency(args) => cmd_consistency(args),
        Command::Bench(args) => cmd_bench(args),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error code={} kind={} msg={:?}", e.exit_code(), e.kind(), e.to_string());
        std::process::exit(e.exit_code());
    }
}
