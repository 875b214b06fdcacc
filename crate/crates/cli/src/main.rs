use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use stn_ocr::autodiff::Fault;
use stn_ocr::checkpoint::load_checkpoint;
use stn_ocr::config::load_toml;
use stn_ocr::data::{generate_scenes, load_dataset, load_image, make_dataset, resize_image, split_dir, write_annotated, SceneSpec};
use stn_ocr::eval::{evaluate, stack_images};
use stn_ocr::gradcheck::{run_suite, CheckOp, GradcheckConfig, Precision};
use stn_ocr::train::{run_curriculum, TrainConfig, TrainOptions};
use stn_ocr::Error;

/// Exit status for failed checks and diverged training.
const EXIT_CHECK: u8 = 1;
/// Exit status for usage, configuration and I/O errors.
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "stn-ocr", version, about = "Scene text detection and recognition trained from text labels only")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Configuration file (scene spec for synth and eval, curriculum for train).
    #[arg(long, global = true, visible_alias = "spec")]
    config: Option<PathBuf>,
    /// Dotted-key override applied to the configuration, e.g. `stages.0.epochs=3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, env = "STN_OCR_OUT")]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; computation is single-threaded, so values above 1 change nothing.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,
    /// Checkpoint to resume training from.
    #[arg(long, global = true)]
    resume: Option<PathBuf>,
    /// Byte-identical outputs across runs (wall-clock fields are zeroed).
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with train, val and test splits.
    Synth {
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Train, val and test fractions.
        #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
        split: Vec<f64>,
    },
    /// Run a training curriculum.
    Train {
        /// Stop after this many epochs (resume later with --resume).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset or on synthetic scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; its `test` split is used when present.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Synthetic scenes to generate from --config when no dataset is given.
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Read one image and draw the predicted boxes.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Reject images whose size differs from the model input instead of resizing.
        #[arg(long)]
        strict: bool,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Restrict to these ops (repeatable).
        #[arg(long = "op")]
        ops: Vec<String>,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long = "precision", value_enum)]
        precisions: Vec<PrecisionArg>,
        /// Plant a known bug to confirm the checker catches it.
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    SamplerSignFlip,
}

fn require_out(g: &Global) -> Result<&Path> {
    g.out.as_deref().context("--out (or STN_OCR_OUT) is required for this command")
}

fn require_config(g: &Global) -> Result<&Path> {
    g.config.as_deref().context("--config is required for this command")
}

fn load_spec(g: &Global) -> Result<SceneSpec> {
    let mut spec: SceneSpec = load_toml(require_config(g)?, &g.overrides)?;
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    spec.validate()?;
    Ok(spec)
}

fn synth(g: &Global, count: usize, split: &[f64]) -> Result<u8> {
    let &[train, val, test] = split else {
        bail!("--split takes three comma-separated fractions, got {}", split.len());
    };
    let spec = load_spec(g)?;
    let out = require_out(g)?;
    let sizes = make_dataset(&spec, count, [train, val, test], out)?;
    println!("wrote {} scenes to {}: train {} val {} test {}", count, out.display(), sizes[0], sizes[1], sizes[2]);
    Ok(0)
}

fn train(g: &Global, stop_after: Option<usize>) -> Result<u8> {
    let mut cfg: TrainConfig = load_toml(require_config(g)?, &g.overrides)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let out = require_out(g)?;
    let opts = TrainOptions {
        out_dir: Some(out.to_path_buf()),
        resume: g.resume.clone(),
        deterministic: g.deterministic,
        stop_after,
    };
    let result = run_curriculum(&cfg, &opts, &mut |m| {
        let iou = m.mean_iou.map_or_else(|| "-".into(), |v| format!("{v:.3}"));
        println!(
            "stage {} ({}) epoch {}: loss {:.4} eval_loss {:.4} seq_acc {:.3} char_acc {:.3} iou {iou} step {}",
            m.stage, m.stage_name, m.epoch, m.loss, m.eval_loss, m.seq_acc, m.char_acc, m.step
        );
    })?;
    if result.complete {
        println!("training complete; checkpoints in {}", out.join("checkpoints").display());
    } else {
        println!("stopped early; resume with --resume {}", out.join("checkpoints").join("latest.stnocr").display());
    }
    Ok(0)
}

fn eval(g: &Global, checkpoint: &Path, data: Option<&Path>, count: usize, batch: usize) -> Result<u8> {
    let model = load_checkpoint(checkpoint)?.model;
    let scenes = match data {
        Some(dir) => {
            let test = split_dir(dir, "test");
            let dir = if test.is_dir() { test } else { dir.to_path_buf() };
            load_dataset(&dir, None, Some(model.config.input_size))?
        }
        None => generate_scenes(&load_spec(g)?, stn_ocr::train::EVAL_OFFSET, count)?,
    };
    let mut model = model;
    let n = scenes[0].labels.len();
    if n != model.config.n_regions {
        model.config.n_regions = n;
        model.config.validate()?;
    }
    let report = evaluate(&model, &scenes, batch)?;
    let iou = report.mean_iou.map_or_else(|| "-".into(), |v| format!("{v:.3}"));
    println!(
        "samples {} seq_acc {:.4} char_acc {:.4} loss {:.4} mean_iou {iou}",
        report.samples, report.seq_acc, report.char_acc, report.loss
    );
    if let Some(out) = &g.out {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let path = out.join("eval.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(0)
}

fn predict(g: &Global, checkpoint: &Path, image: &Path, strict: bool) -> Result<u8> {
    let out = require_out(g)?;
    let model = load_checkpoint(checkpoint)?.model;
    let original = load_image(image)?;
    let [h, w] = model.config.input_size;
    let found = [original.shape()[1], original.shape()[2]];
    if found != [h, w] && strict {
        bail!("{} is {}x{}, the model expects {w}x{h}", image.display(), found[1], found[0]);
    }
    let input = resize_image(&original, [h, w])?;
    let regions = model.predict(&stack_images(&[&input])?)?.remove(0);
    // boxes are reported in the coordinates of the original image
    let (sx, sy) = (found[1] as f64 / w as f64, found[0] as f64 / h as f64);
    let boxes: Vec<[f64; 4]> =
        regions.iter().map(|r| r.bbox.clipped(h, w)).map(|b| [b[0] * sx, b[1] * sy, b[2] * sx, b[3] * sy]).collect();
    let doc = json!({
        "regions": regions.iter().zip(&boxes).map(|(r, b)| json!({
            "box": b,
            "text": r.text,
            "confidence": r.confidence,
        })).collect::<Vec<_>>(),
    });
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let json_path = out.join("prediction.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&doc)?)
        .with_context(|| format!("writing {}", json_path.display()))?;
    write_annotated(&out.join("annotated.png"), &original, &boxes)?;
    println!("{doc}");
    Ok(0)
}

fn gradcheck(
    g: &Global,
    ops: &[String],
    instances: usize,
    precisions: &[PrecisionArg],
    fault: Option<FaultArg>,
) -> Result<u8> {
    let mut cfg = GradcheckConfig { seed: g.seed.unwrap_or(0), instances, ..GradcheckConfig::default() };
    if !ops.is_empty() {
        cfg.ops = ops.iter().map(|o| o.parse::<CheckOp>()).collect::<Result<_, _>>()?;
    }
    if !precisions.is_empty() {
        cfg.precisions = precisions
            .iter()
            .map(|p| match p {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            })
            .collect();
    }
    cfg.fault = fault.map(|f| match f {
        FaultArg::SamplerSignFlip => Fault::SamplerSignFlip,
    });
    let reports = run_suite(&cfg)?;
    for r in &reports {
        let verdict = if r.passed { "ok" } else { "FAIL" };
        let p = if r.precision == Precision::F32 { "f32" } else { "f64" };
        println!(
            "{:<16} {p} max_rel_err {:.3e} (tolerance {:.0e}) instances {} rejected {} {verdict}",
            r.op.name(),
            r.max_rel_err,
            r.tolerance,
            r.instances,
            r.rejected
        );
    }
    if let Some(out) = &g.out {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let path = out.join("gradcheck.json");
        std::fs::write(&path, serde_json::to_string_pretty(&reports)?).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(if reports.iter().all(|r| r.passed) { 0 } else { EXIT_CHECK })
}

fn run(cli: &Cli) -> Result<u8> {
    let g = &cli.global;
    match &cli.command {
        Command::Synth { count, split } => synth(g, *count, split),
        Command::Train { stop_after } => train(g, *stop_after),
        Command::Eval { checkpoint, data, count, batch_size } => eval(g, checkpoint, data.as_deref(), *count, *batch_size),
        Command::Predict { checkpoint, image, strict } => predict(g, checkpoint, image, *strict),
        Command::Gradcheck { ops, instances, precisions, inject_fault } => {
            gradcheck(g, ops, *instances, precisions, *inject_fault)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match e.downcast_ref::<Error>() {
                Some(Error::Diverged { .. }) => EXIT_CHECK,
                _ => EXIT_USAGE,
            };
            ExitCode::from(code)
        }
    }
}
