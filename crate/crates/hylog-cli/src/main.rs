//! Command-line front end: dataset synthesis, training, inference,
//! evaluation, the gradient-check suite and the attention benchmark.
//!
//! Exit codes: 0 success, 1 usage, 2 data/format error, 3 numerical
//! failure (gradient check failure, divergence, non-finite values).

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use hylog::blocks::BlockKind;
use hylog::checkpoint::{model_from_bundle_for_size, CheckpointBundle};
use hylog::config::RunConfig;
use hylog::data::{generate_dataset, load_image, save_image, Split};
use hylog::error::Error;
use hylog::flops::{bench_attention, write_bench_csv, BenchRecord};
use hylog::layers::Mode;
use hylog::optim::{evaluate_checkpoint, hazy_baseline, train};

#[derive(Parser)]
#[command(name = "hylog", version, about = "Hybrid local-global attention dehazing at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic hazy dataset with exact ground truth.
    Synth(SynthArgs),
    /// Train a model on a synthesized dataset.
    Train(TrainArgs),
    /// Dehaze a single PPM image with a trained checkpoint.
    Infer(InferArgs),
    /// Evaluate a checkpoint on one dataset split.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Time attention variants against the analytic cost model.
    BenchAttn(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of training samples.
    #[arg(long)]
    count: usize,
    /// Number of held-out test samples.
    #[arg(long, default_value_t = 0)]
    test_count: usize,
    /// Image extent, e.g. 64x64.
    #[arg(long)]
    size: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// key=value or JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the predicted reflectance next to --out.
    #[arg(long)]
    emit_reflectance: bool,
    /// Also write the predicted shading next to --out.
    #[arg(long)]
    emit_shading: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Optional per-sample CSV output.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Only run checks whose name contains this substring.
    #[arg(long)]
    module: Option<String>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated HxWxC triples, e.g. 64x64x16,128x128x16.
    #[arg(long)]
    sizes: String,
    #[arg(long)]
    csv: PathBuf,
    /// Comma-separated variants (vit = standard full attention).
    #[arg(long, default_value = "hybrid,vit")]
    variants: String,
    /// Timed runs per configuration (after one warmup).
    #[arg(long, default_value_t = 3)]
    runs: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Evaluate local windows on a thread pool.
    #[arg(long)]
    parallel: bool,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } | Error::NonFinite { .. } | Error::GradcheckFailed(_) => 3,
        _ => 2,
    }
}

fn parse_size2(s: &str) -> Result<(usize, usize), Error> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() == 2 {
        if let (Ok(h), Ok(w)) = (parts[0].parse(), parts[1].parse()) {
            return Ok((h, w));
        }
    }
    Err(Error::Config(format!("bad size `{s}`, expected HxW")))
}

fn parse_size3(s: &str) -> Result<(usize, usize, usize), Error> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() == 3 {
        if let (Ok(h), Ok(w), Ok(c)) = (parts[0].parse(), parts[1].parse(), parts[2].parse()) {
            return Ok((h, w, c));
        }
    }
    Err(Error::Config(format!("bad size `{s}`, expected HxWxC")))
}

fn parse_variant(s: &str) -> Result<BlockKind, Error> {
    match s {
        "standard" => Ok(BlockKind::Vit),
        other => other.parse(),
    }
}

fn run_synth(args: &SynthArgs) -> Result<(), Error> {
    let (h, w) = parse_size2(&args.size)?;
    let manifest = generate_dataset(&args.out, args.count, args.test_count, h, w, args.seed)?;
    println!(
        "wrote {} samples ({} train, {} test) at {h}x{w} under {}",
        manifest.entries.len(),
        args.count,
        args.test_count,
        args.out.display()
    );
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<(), Error> {
    let cfg = RunConfig::load(&args.config)?;
    let report = train(&cfg.model, &cfg.train, &args.data, &args.out)?;
    let last = report.step_losses.last().expect("at least one step");
    println!(
        "trained {} steps; final loss {:.6}; checkpoint {}",
        report.steps_run,
        last.total,
        report.final_checkpoint.display()
    );
    if let Some((_, p, s)) = report.epoch_evals.last() {
        println!("held-out psnr={p:.6} ssim={s:.6}");
    }
    Ok(())
}

fn side_output(out: &Path, tag: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("ppm");
    out.with_file_name(format!("{stem}_{tag}.{ext}"))
}

fn run_infer(args: &InferArgs) -> Result<(), Error> {
    let bundle = CheckpointBundle::read(&args.checkpoint)?;
    let image = load_image(&args.input)?;
    let hw = (image.shape()[0], image.shape()[1]);
    let mut model = model_from_bundle_for_size(&bundle, hw)?;
    let out = model.forward(&image, Mode::Eval)?;
    save_image(&args.out, &out.dehazed)?;
    println!("wrote {}", args.out.display());
    if args.emit_reflectance {
        let r = out.reflectance.as_ref().ok_or_else(|| {
            Error::Config("checkpoint has no reflectance decoder".into())
        })?;
        let path = side_output(&args.out, "refl");
        save_image(&path, r)?;
        println!("wrote {}", path.display());
    }
    if args.emit_shading {
        let s = out
            .shading
            .as_ref()
            .ok_or_else(|| Error::Config("checkpoint has no shading decoder".into()))?;
        let path = side_output(&args.out, "shad");
        save_image(&path, s)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<(), Error> {
    let split: Split = args.split.parse()?;
    let report = evaluate_checkpoint(&args.checkpoint, &args.data, split)?;
    let (base_psnr, base_ssim) = hazy_baseline(&args.data, split)?;
    println!(
        "mean_psnr={:.6} mean_ssim={:.6} baseline_psnr={base_psnr:.6} baseline_ssim={base_ssim:.6} samples={}",
        report.mean_psnr,
        report.mean_ssim,
        report.per_sample.len()
    );
    if let Some(csv) = &args.csv {
        let mut text = String::from("stem,psnr,ssim\n");
        for (stem, p, s) in &report.per_sample {
            text.push_str(&format!("{stem},{p:.6},{s:.6}\n"));
        }
        std::fs::write(csv, text)?;
    }
    Ok(())
}

fn run_gradcheck(args: &GradcheckArgs) -> Result<(), Error> {
    let outcomes = hylog::gradcheck::run_suite(args.module.as_deref(), args.seed)?;
    if outcomes.is_empty() {
        return Err(Error::Config(format!(
            "no gradient checks match `{}`",
            args.module.as_deref().unwrap_or("")
        )));
    }
    let mut failures = 0;
    for o in &outcomes {
        println!("{o}");
        if !o.report.passed {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(Error::GradcheckFailed(format!(
            "{failures} of {} checks failed",
            outcomes.len()
        )));
    }
    Ok(())
}

fn run_bench(args: &BenchArgs) -> Result<(), Error> {
    let sizes: Vec<(usize, usize, usize)> = args
        .sizes
        .split(',')
        .map(parse_size3)
        .collect::<Result<_, _>>()?;
    let mut records: Vec<BenchRecord> = Vec::new();
    for v in args.variants.split(',') {
        let variant = parse_variant(v.trim())?;
        records.extend(bench_attention(
            variant,
            &sizes,
            args.runs,
            args.heads,
            args.parallel,
        )?);
    }
    for r in &records {
        println!(
            "{:<10} {}x{}x{}  macs={}  median={:.3} ms  runs={}",
            r.variant.as_str(),
            r.h,
            r.w,
            r.c,
            r.macs,
            r.ns_median as f64 / 1e6,
            r.runs
        );
    }
    write_bench_csv(&args.csv, &records)?;
    println!("wrote {}", args.csv.display());
    Ok(())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Infer(a) => run_infer(a),
        Command::Eval(a) => run_eval(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::BenchAttn(a) => run_bench(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
