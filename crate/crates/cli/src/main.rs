use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rangesam::config::RunConfig;
use rangesam::gradcheck::{self, Fault, GradcheckConfig, Precision};
use rangesam::kitti::{read_labeled_scan, read_scan, LabelRemap, Split};
use rangesam::model::{count_parameters, RangeSam};
use rangesam::projection::{label_rgb, range_rgb, rasterize, save_ppm};
use rangesam::train::{evaluate, load_model, DataSource, EvalReport, Trainer, CHECKPOINT_FILE};

#[derive(Parser)]
#[command(name = "rangesam", version, about = "Range-view LiDAR semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize one scan and write range/label previews.
    Project(ProjectArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print the per-class IoU table.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable op and the toy model.
    Gradcheck(GradcheckArgs),
    /// Parameter counts of the configured model.
    Stats(ConfigArgs),
    /// Print the effective configuration as TOML.
    Config(ConfigArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration; presets apply only when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Desk-scale model and 16 x 256 raster.
    #[arg(long)]
    toy: bool,
    /// Procedural scenes instead of a dataset on disk (overfitting preset).
    #[arg(long)]
    synthetic: bool,
    /// Override a config value, e.g. `--set optimizer.head.lr=0.002` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None if self.toy => RunConfig::toy(),
            None => RunConfig::default(),
        };
        if self.synthetic {
            cfg = cfg.synthetic();
        }
        Ok(cfg.with_overrides(&self.overrides)?)
    }
}

#[derive(Args)]
struct ProjectArgs {
    /// Velodyne `.bin` scan.
    scan: PathBuf,
    /// Matching `.label` file.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Output directory for `range.ppm` and `labels.ppm`.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Directory for the checkpoint, step log and metrics.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Evaluate on the training data after the last step.
    #[arg(long)]
    eval_train: bool,
    /// Print every Nth step.
    #[arg(long, default_value_t = 10)]
    log_every: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split to evaluate (defaults to `val`).
    #[arg(long, default_value = "val")]
    split: Split,
    /// Write structured metrics here.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "f64")]
    precision: Precision,
    /// Deliberately break one backward rule to confirm the check fails.
    #[arg(long)]
    inject_fault: Option<Fault>,
    /// Only the op suite, skip the end-to-end model.
    #[arg(long)]
    no_model: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Project(a) => project(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Stats(a) => {
            let cfg = a.resolve()?;
            let (_, store) = RangeSam::new(cfg.model.clone(), cfg.seed)?;
            println!("{}", count_parameters(&store, &cfg.model));
            Ok(ExitCode::SUCCESS)
        }
        Command::Config(a) => {
            print!("{}", a.resolve()?.to_toml());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn project(a: ProjectArgs) -> Result<ExitCode> {
    let cfg = a.cfg.resolve()?;
    let remap = match &cfg.data.remap {
        Some(p) => LabelRemap::from_file(p)?,
        None => LabelRemap::semantic_kitti(),
    };
    let pc = match &a.labels {
        Some(l) => read_labeled_scan(&a.scan, l, &remap)?,
        None => read_scan(&a.scan)?,
    };
    let img = rasterize(&pc, &cfg.projection);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let range_path = a.out.join("range.ppm");
    save_ppm(&range_path, img.width, img.height, &range_rgb(&img)).with_context(|| range_path.display().to_string())?;
    println!("{} points -> {}x{} raster, {} valid pixels ({:.1}% occupancy)", pc.len(), img.height, img.width, img.valid_count(), 100.0 * img.occupancy());
    println!("wrote {}", range_path.display());
    if let Some(labels) = &img.labels {
        let p = a.out.join("labels.ppm");
        save_ppm(&p, img.width, img.height, &label_rgb(labels)).with_context(|| p.display().to_string())?;
        println!("wrote {}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn print_eval(report: &EvalReport, method: &str) {
    println!("point-level ({} scans):", report.scans);
    print!("{}", report.points.miou().table(method));
    println!("pixel-level:");
    print!("{}", report.pixels.miou().table(method));
}

fn eval_json(report: &EvalReport) -> serde_json::Value {
    serde_json::json!({
        "scans": report.scans,
        "points": report.points.miou().to_json(),
        "pixels": report.pixels.miou().to_json(),
        "point_accuracy": report.points.accuracy(),
        "pixel_accuracy": report.pixels.accuracy(),
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = a.cfg.resolve()?;
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg.clone())?;
    if let Some(ckpt) = &a.resume {
        trainer.resume(ckpt)?;
        println!("resumed from {} at step {}", ckpt.display(), trainer.step());
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("config.toml"), cfg.to_toml()).context("writing config.toml")?;
    println!(
        "training {} steps ({} per epoch, {} warm-up), {} parameters",
        trainer.total_steps,
        trainer.steps_per_epoch,
        trainer.warmup_steps,
        trainer.store.numel()
    );
    let every = a.log_every.max(1);
    let total = trainer.total_steps;
    let summary = trainer.run(Some(&a.out), |s| {
        if s.step % every == 0 || s.step + 1 == total {
            println!(
                "step {:>5}/{total}  epoch {:>3}  loss {:.4}  (wce {:.4} dice {:.4} bnd {:.4} iou {:.4})  lr {:.2e}/{:.2e}",
                s.step + 1,
                s.epoch,
                s.loss,
                s.terms.wce,
                s.terms.dice,
                s.terms.boundary,
                s.terms.iou,
                s.lr_backbone,
                s.lr_head
            );
        }
    })?;
    println!("finished {} steps in {:.1} s, final loss {:.4}", summary.steps, start.elapsed().as_secs_f64(), summary.final_loss);
    if let Some(p) = &summary.checkpoint {
        println!("checkpoint {}", p.display());
    }
    if a.eval_train {
        let data = DataSource::open(&cfg, cfg.data.split)?;
        let report = evaluate(&trainer.model, &trainer.store, &cfg, &data)?;
        print_eval(&report, "train");
        let mut json = eval_json(&report);
        json["steps"] = summary.steps.into();
        json["seconds"] = start.elapsed().as_secs_f64().into();
        write_json(&a.out.join("train_metrics.json"), &json)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let mut cfg = a.cfg.resolve()?;
    cfg.data.split = a.split;
    if !a.checkpoint.is_file() {
        bail!("checkpoint {} not found (training writes {CHECKPOINT_FILE} into its --out directory)", a.checkpoint.display());
    }
    let (model, store) = load_model(&cfg, &a.checkpoint)?;
    let data = DataSource::open(&cfg, a.split)?;
    let report = evaluate(&model, &store, &cfg, &data)?;
    print_eval(&report, "RangeSAM");
    if let Some(p) = &a.metrics {
        write_json(p, &eval_json(&report))?;
        println!("wrote {}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn run_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let cfg = GradcheckConfig {
        include_model: !a.no_model,
        fault: a.inject_fault,
        seed: a.seed,
        ..GradcheckConfig::new(a.precision)
    };
    let report = gradcheck::run(&cfg)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("{report}");
    }
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
