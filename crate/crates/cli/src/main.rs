//! `slab`: training, fusion, benchmarking and self-verification.
//!
//! Exit codes: 0 success, 1 verification or contract failure, 2 usage or
//! configuration error.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slab_core::bench::{self, BenchSpec, BenchTarget, ReportFormat};
use slab_core::model::{self, Model};
use slab_core::tensor::kernels;
use slab_core::training::{self, Record};
use slab_core::verify::{self, FaultInjection, Suite, VerifyOptions};
use slab_core::{DType, Float, Result, SlabError};

const CHECKPOINT_FILE: &str = "checkpoint.slab";
const METRICS_FILE: &str = "metrics.jsonl";
const SNAPSHOT_FILE: &str = "config.toml";
const PROBE_BATCHES: usize = 4;

#[derive(Parser)]
#[command(name = "slab", version, about = "PRepBN and simplified linear attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file and write checkpoint, metrics and a
    /// config snapshot into the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `[train] seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fold the normalizations of a converged checkpoint into its linear layers.
    Fuse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed of the random probe batches.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Latency sweep over sequence lengths.
    Bench(BenchArgs),
    /// Run the self-check suites and print a pass/fail table.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Debug hook: offset η on the re-parameterized side of the lemma check.
        #[arg(long, hide = true)]
        inject_eta_offset: Option<f64>,
    },
}

#[derive(Args)]
struct BenchArgs {
    /// Config file whose `[bench]` section supplies defaults for the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// attention, normalization or full-block.
    #[arg(long)]
    target: Option<String>,
    /// Comma-separated variants; defaults to every variant of the target.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    seq_lens: Option<Vec<usize>>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    warmup_iters: Option<usize>,
    #[arg(long)]
    timed_iters: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
    /// Kernel threads in the timed region (capped by SLAB_THREADS).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// csv or json.
    #[arg(long, default_value = "csv")]
    format: String,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    kernels::init_threads_from_env();
    let outcome = match cli.command {
        Command::Train { config, out, seed } => cmd_train(&config, &out, seed),
        Command::Fuse { checkpoint, out, seed } => cmd_fuse(&checkpoint, &out, seed),
        Command::Bench(args) => cmd_bench(args),
        Command::Verify {
            suite,
            seed,
            inject_eta_offset,
        } => cmd_verify(&suite, seed, inject_eta_offset),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("slab: error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &SlabError) -> u8 {
    match e {
        SlabError::Config { .. } | SlabError::Io { .. } => 2,
        _ => 1,
    }
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| SlabError::io(path, e))
}

fn cmd_train(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<bool> {
    let mut cfg = config::load(config_path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.check_model_matches_data()?;
    io(out, std::fs::create_dir_all(out))?;
    let snapshot = out.join(SNAPSHOT_FILE);
    io(&snapshot, std::fs::write(&snapshot, config::to_toml(&cfg)?))?;

    let data = training::load_dataset::<f32>(&cfg.data)?;
    let mut model = Model::<f32>::seeded(&cfg.model, cfg.train.seed)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let artifacts = match training::train(&mut model, &data, &cfg.train) {
        Ok(a) => a,
        Err(e @ SlabError::DivergedLoss { .. }) => {
            model::save_checkpoint(&model, &ckpt)?;
            eprintln!("slab: last good state written to {}", ckpt.display());
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    model::save_checkpoint(&model, &ckpt)?;
    let metrics = match &cfg.train.metrics_path {
        Some(p) => out.join(p),
        None => out.join(METRICS_FILE),
    };
    artifacts.write_jsonl(&metrics)?;

    println!("steps            {}", artifacts.steps);
    println!("decay steps      {}", artifacts.decay_steps);
    println!("final gamma      {}", model.gamma());
    for r in &artifacts.records {
        if let Record::Recalibration {
            test_loss_before,
            test_loss_after,
            ..
        } = r
        {
            println!("recalibration    test loss {test_loss_before:.4} -> {test_loss_after:.4}");
        }
    }
    if let Some(acc) = artifacts.final_test_acc {
        println!("final test acc   {:.4}", acc);
    }
    println!("checkpoint       {}", ckpt.display());
    println!("metrics          {}", metrics.display());
    println!("config snapshot  {}", snapshot.display());
    Ok(true)
}

fn cmd_fuse(input: &Path, out: &Path, seed: u64) -> Result<bool> {
    let bytes = io(input, std::fs::read(input))?;
    let (header, _) = model::read_header(&bytes)?;
    if header.config.fused {
        println!("notice: {} is already fused; writing it unchanged", input.display());
        io(out, std::fs::write(out, &bytes))?;
        return Ok(true);
    }
    match header.precision {
        DType::F32 => fuse_typed::<f32>(&bytes, out, seed, verify::FUSION_TOL_F32),
        DType::F64 => fuse_typed::<f64>(&bytes, out, seed, verify::FUSION_TOL_F64),
    }
}

fn fuse_typed<T: Float>(bytes: &[u8], out: &Path, seed: u64, tol: f64) -> Result<bool> {
    let m: Model<T> = model::checkpoint_from_bytes(bytes)?;
    let fused = model::fuse_model(&m)?;
    let diff = verify::probe_difference(&m, &fused, PROBE_BATCHES, seed)?;
    model::save_checkpoint(&fused, out)?;
    println!("parameters       {} -> {}", m.param_count(), fused.param_count());
    println!("max |logit diff| {diff:.3e} (tolerance {tol:.0e})");
    println!("fused checkpoint {}", out.display());
    if diff > tol {
        eprintln!("slab: fused model disagrees with the original beyond tolerance");
        return Ok(false);
    }
    Ok(true)
}

fn bench_spec(args: &BenchArgs) -> Result<BenchSpec> {
    let mut spec = match &args.config {
        Some(p) => config::load(p)?.bench,
        None => BenchSpec::default(),
    };
    if let Some(t) = &args.target {
        let target: BenchTarget = t.parse()?;
        if target != spec.target {
            spec.target = target;
            spec.variants = target.default_variants();
        }
    }
    if let Some(v) = &args.variants {
        spec.variants = v.clone();
    }
    if let Some(s) = &args.seq_lens {
        spec.seq_lens = s.clone();
    }
    macro_rules! take {
        ($($f:ident),*) => {$(
            if let Some(v) = args.$f {
                spec.$f = v;
            }
        )*};
    }
    take!(dim, heads, warmup_iters, timed_iters, repetitions, threads, seed);
    if let Some(cap) = env_threads() {
        spec.threads = spec.threads.min(cap);
    }
    spec.validate()?;
    Ok(spec)
}

fn env_threads() -> Option<usize> {
    std::env::var("SLAB_THREADS").ok()?.trim().parse().ok()
}

fn cmd_bench(args: BenchArgs) -> Result<bool> {
    let format: ReportFormat = args.format.parse()?;
    let spec = bench_spec(&args)?;
    let report = bench::run_sweep(&spec)?;
    let script = bench::emit_report(&report, format, &args.out)?;

    println!("{:<12} {:>7} {:>12} {:>10} {:>14}", "variant", "N", "median_ms", "iqr_ms", "flops");
    for p in &report.points {
        println!(
            "{:<12} {:>7} {:>12.4} {:>10.4} {:>14}",
            p.variant,
            p.n,
            p.median_ms,
            p.iqr_ms(),
            p.flops
        );
    }
    for s in &report.slopes {
        println!(
            "slope {:<12} {:.3} [{:.3}, {:.3}]",
            s.variant, s.slope, s.ci_lo, s.ci_hi
        );
    }
    for n in &report.notices {
        eprintln!("notice: {n}");
    }
    println!("report           {}", args.out.display());
    println!("plot script      {}", script.display());
    Ok(true)
}

fn cmd_verify(suite: &str, seed: u64, eta_offset: Option<f64>) -> Result<bool> {
    let suite: Suite = suite.parse()?;
    let opts = VerifyOptions {
        seed,
        fault: FaultInjection { eta_offset },
        ..VerifyOptions::default()
    };
    let report = verify::run(suite, &opts)?;
    print!("{}", report.table());
    Ok(report.all_passed())
}
