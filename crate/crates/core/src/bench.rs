//! Latency sweeps over sequence length with log-log scaling fits.
//!
//! Variants of one target are timed interleaved, one call each per round, so
//! slow drift of the machine affects all of them alike. Each point reports
//! the median and interquartile range of its samples.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, TokenGrid, DEFAULT_DWC_KERNEL, DEFAULT_EPS_DENOM};
use crate::error::{Result, SlabError};
use crate::model::{self, AttnKind, Block, Model, ModelConfig, NormKind};
use crate::normalization::{self as norm, BNParams, LNParams, RepBNParams};
use crate::tensor::kernels;
use crate::tensor::Tensor;

pub const MIN_TIMED_ITERS: usize = 30;
pub const MIN_FIT_POINTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchTarget {
    Attention,
    Normalization,
    FullBlock,
}

impl BenchTarget {
    pub fn name(self) -> &'static str {
        match self {
            BenchTarget::Attention => "attention",
            BenchTarget::Normalization => "normalization",
            BenchTarget::FullBlock => "full-block",
        }
    }

    pub fn valid_variants(self) -> &'static [&'static str] {
        match self {
            BenchTarget::Attention => &["softmax", "sla"],
            BenchTarget::Normalization => &["layernorm", "batchnorm", "repbn"],
            BenchTarget::FullBlock => &["layernorm", "prepbn", "fused-bn"],
        }
    }

    pub fn default_variants(self) -> Vec<String> {
        self.valid_variants().iter().map(|s| s.to_string()).collect()
    }
}

impl std::str::FromStr for BenchTarget {
    type Err = SlabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(BenchTarget::Attention),
            "normalization" => Ok(BenchTarget::Normalization),
            "full-block" => Ok(BenchTarget::FullBlock),
            _ => Err(SlabError::Config {
                section: "bench".into(),
                message: format!("unknown target {s:?}; valid targets: attention, normalization, full-block"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    pub target: BenchTarget,
    pub variants: Vec<String>,
    pub seq_lens: Vec<usize>,
    pub dim: usize,
    pub heads: usize,
    /// Attention used inside the full-block target.
    pub block_attention: AttnKind,
    pub mlp_ratio: f64,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub repetitions: usize,
    /// Kernel threads inside the timed region.
    pub threads: usize,
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            target: BenchTarget::Attention,
            variants: BenchTarget::Attention.default_variants(),
            seq_lens: vec![256, 512, 1024, 2048, 4096, 8192],
            dim: 192,
            heads: 3,
            block_attention: AttnKind::Sla,
            mlp_ratio: 4.0,
            warmup_iters: 3,
            timed_iters: MIN_TIMED_ITERS,
            repetitions: 1,
            threads: 1,
            bootstrap: 1000,
            seed: 0,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| {
            Err(SlabError::Config {
                section: "bench".into(),
                message: m,
            })
        };
        let valid = self.target.valid_variants();
        for v in &self.variants {
            if !valid.contains(&v.as_str()) {
                return bad(format!(
                    "unknown variant {v:?} for target {}; valid variants: {}",
                    self.target.name(),
                    valid.join(", ")
                ));
            }
        }
        if self.variants.is_empty() {
            return bad("no variants selected".into());
        }
        if self.timed_iters < MIN_TIMED_ITERS {
            return bad(format!("timed_iters {} below the minimum of {MIN_TIMED_ITERS}", self.timed_iters));
        }
        if self.repetitions == 0 {
            return bad("repetitions must be positive".into());
        }
        if self.seq_lens.is_empty() || self.seq_lens.contains(&0) {
            return bad("seq_lens must be non-empty and positive".into());
        }
        if self.seq_lens.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!("seq_lens {:?} must be strictly increasing", self.seq_lens));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub variant: String,
    pub n: usize,
    pub c: usize,
    pub median_ms: f64,
    pub q1_ms: f64,
    pub q3_ms: f64,
    pub flops: u64,
    pub samples: usize,
}

impl BenchPoint {
    pub fn iqr_ms(&self) -> f64 {
        self.q3_ms - self.q1_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub variant: String,
    pub c: usize,
    pub slope: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvMeta {
    pub os: String,
    pub arch: String,
    pub available_cores: usize,
    pub threads: usize,
    pub precision: String,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub repetitions: usize,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub target: BenchTarget,
    pub points: Vec<BenchPoint>,
    pub slopes: Vec<SlopeFit>,
    pub env: EnvMeta,
    pub notices: Vec<String>,
}

impl BenchReport {
    pub fn point(&self, variant: &str, n: usize) -> Option<&BenchPoint> {
        self.points.iter().find(|p| p.variant == variant && p.n == n)
    }

    pub fn slope(&self, variant: &str) -> Option<&SlopeFit> {
        self.slopes.iter().find(|s| s.variant == variant)
    }
}

/// Most square `h×w` grid holding exactly `n` tokens, `h ≤ w`.
pub fn grid_for(n: usize) -> TokenGrid {
    let mut h = (n as f64).sqrt() as usize;
    while h > 1 && n % h != 0 {
        h -= 1;
    }
    let h = h.max(1);
    TokenGrid::new(h, n / h)
}

/// Linear interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

/// Least-squares slope of `log t` against `log N` with a percentile
/// bootstrap interval (2.5%, 97.5%) over `resamples` resamplings of the
/// points.
pub fn fit_scaling_exponent(points: &[(f64, f64)], resamples: usize, seed: u64) -> Result<(f64, (f64, f64))> {
    if points.len() < MIN_FIT_POINTS {
        return Err(SlabError::InsufficientPoints {
            needed: MIN_FIT_POINTS,
            got: points.len(),
        });
    }
    for &(n, t) in points {
        if !(t > 0.0) {
            return Err(SlabError::NonPositiveLatency(t));
        }
        if !(n > 0.0) {
            return Err(SlabError::NonPositiveLatency(n));
        }
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let slope = least_squares_slope(&xs, &ys).ok_or(SlabError::InsufficientPoints {
        needed: MIN_FIT_POINTS,
        got: 1,
    })?;
    if resamples == 0 {
        return Ok((slope, (slope, slope)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fits = Vec::with_capacity(resamples);
    let (mut bx, mut by) = (vec![0.0; xs.len()], vec![0.0; xs.len()]);
    while fits.len() < resamples {
        for i in 0..xs.len() {
            let j = rng.gen_range(0..xs.len());
            bx[i] = xs[j];
            by[i] = ys[j];
        }
        if let Some(s) = least_squares_slope(&bx, &by) {
            fits.push(s);
        }
    }
    fits.sort_by(|a, b| a.total_cmp(b));
    Ok((slope, (quantile(&fits, 0.025), quantile(&fits, 0.975))))
}

type Runner = Box<dyn FnMut() -> Result<()>>;

fn attention_runner(variant: &str, n: usize, spec: &BenchSpec, rng: &mut ChaCha8Rng) -> Result<(Runner, u64)> {
    let c = spec.dim;
    let grid = grid_for(n);
    let q = Tensor::<f32>::randn(&[n, c], 1.0, rng);
    let k = Tensor::<f32>::randn(&[n, c], 1.0, rng);
    let v = Tensor::<f32>::randn(&[n, c], 1.0, rng);
    let heads = spec.heads;
    let kind = if variant == "softmax" { AttnKind::Softmax } else { AttnKind::Sla };
    let flops = model::attention_macs(kind, grid, c, heads, DEFAULT_DWC_KERNEL);
    let run: Runner = match kind {
        AttnKind::Softmax => Box::new(move || {
            std::hint::black_box(attention::softmax_attention_core(&q, &k, &v, heads)?);
            Ok(())
        }),
        AttnKind::Sla => {
            let kernel = Tensor::<f32>::randn(&[c, DEFAULT_DWC_KERNEL, DEFAULT_DWC_KERNEL], 0.02, rng);
            Box::new(move || {
                std::hint::black_box(attention::sla_attention_core(
                    &q,
                    &k,
                    &v,
                    heads,
                    &kernel,
                    grid,
                    DEFAULT_EPS_DENOM,
                )?);
                Ok(())
            })
        }
    };
    Ok((run, flops))
}

fn normalization_runner(variant: &str, n: usize, spec: &BenchSpec, rng: &mut ChaCha8Rng) -> Result<(Runner, u64)> {
    let c = spec.dim;
    let x = Tensor::<f32>::randn(&[n, c], 1.0, rng);
    let nc = (n * c) as u64;
    Ok(match variant {
        "layernorm" => {
            let p = LNParams::<f32>::new(c);
            (
                Box::new(move || {
                    std::hint::black_box(norm::layernorm(&x, &p)?);
                    Ok(())
                }),
                3 * nc,
            )
        }
        "batchnorm" => {
            let p = BNParams::<f32>::new(c);
            (
                Box::new(move || {
                    std::hint::black_box(norm::batchnorm_eval(&x, &p)?);
                    Ok(())
                }),
                nc,
            )
        }
        _ => {
            let mut p = RepBNParams::<f32>::new(c);
            p.eta = Tensor::randn(&[c], 0.1, rng);
            (
                Box::new(move || {
                    std::hint::black_box(norm::repbn_eval(&x, &p)?);
                    Ok(())
                }),
                2 * nc,
            )
        }
    })
}

fn block_config(spec: &BenchSpec, n: usize, norm_kind: NormKind) -> ModelConfig {
    ModelConfig {
        depth: 1,
        dim: spec.dim,
        heads: spec.heads,
        mlp_ratio: spec.mlp_ratio,
        norm_kind,
        attn_kind: spec.block_attention,
        grid: grid_for(n),
        patch_size: 1,
        in_channels: 1,
        decay_steps: 0,
        ..ModelConfig::default()
    }
}

fn block_runner(variant: &str, n: usize, spec: &BenchSpec, seed: u64) -> Result<(Runner, u64)> {
    // Same weights for every variant of a point.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = block_config(spec, n, NormKind::PRepBN);
    let mut m = Model::<f32>::init(&cfg, &mut rng)?;
    for nt in m.named_tensors_mut() {
        if nt.name.ends_with("eta") || nt.name.ends_with("running_mean") {
            *nt.tensor = Tensor::randn(nt.tensor.shape(), 0.1, &mut rng);
        }
    }
    let x = Tensor::<f32>::randn(&[n, spec.dim], 1.0, &mut rng);
    let (block, flops_cfg): (Block<f32>, ModelConfig) = match variant {
        "layernorm" => {
            let mut b = m.blocks[0].clone();
            b.norm1 = model::Norm::Layer(LNParams::new(spec.dim));
            b.norm2 = model::Norm::Layer(LNParams::new(spec.dim));
            (b, block_config(spec, n, NormKind::LayerNorm))
        }
        "prepbn" => (m.blocks[0].clone(), cfg.clone()),
        _ => {
            let fused = model::fuse_model(&m)?;
            (fused.blocks[0].clone(), fused.config.clone())
        }
    };
    let flops = model::count_flops(&flops_cfg).per_block.total;
    let grid = cfg.grid;
    let kind = cfg.attn_kind;
    Ok((
        Box::new(move || {
            std::hint::black_box(model::block_eval(&x, &block, 1, grid, kind)?);
            Ok(())
        }),
        flops,
    ))
}

fn env_meta(spec: &BenchSpec) -> EnvMeta {
    EnvMeta {
        os: std::env::consts::OS.into(),
        arch: std::env::consts::ARCH.into(),
        available_cores: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        threads: spec.threads,
        precision: "f32".into(),
        warmup_iters: spec.warmup_iters,
        timed_iters: spec.timed_iters,
        repetitions: spec.repetitions,
        note: (spec.threads > 1).then(|| "multi-threaded kernels; scaling fits include parallel overheads".into()),
    }
}

/// Keeps freed buffers in the process so each timed iteration reuses the
/// previous iteration's memory instead of faulting in fresh pages.
fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator thresholds.
    unsafe {
        // 32 MiB is the largest mmap threshold glibc accepts on 64-bit.
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}

/// Times every variant at every sequence length and fits scaling exponents.
pub fn run_sweep(spec: &BenchSpec) -> Result<BenchReport> {
    spec.validate()?;
    retain_freed_memory();
    let saved_threads = kernels::threads();
    kernels::set_threads(spec.threads.max(1));
    let result = sweep_inner(spec);
    kernels::set_threads(saved_threads);
    result
}

fn sweep_inner(spec: &BenchSpec) -> Result<BenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut points = Vec::new();
    for &n in &spec.seq_lens {
        // Variants of one point see the same inputs.
        let point_seed: u64 = rng.gen();
        let mut runners = Vec::with_capacity(spec.variants.len());
        for v in &spec.variants {
            let r = match spec.target {
                BenchTarget::Attention => {
                    attention_runner(v, n, spec, &mut ChaCha8Rng::seed_from_u64(point_seed))?
                }
                BenchTarget::Normalization => {
                    normalization_runner(v, n, spec, &mut ChaCha8Rng::seed_from_u64(point_seed))?
                }
                BenchTarget::FullBlock => block_runner(v, n, spec, point_seed)?,
            };
            runners.push(r);
        }
        for (run, _) in runners.iter_mut() {
            for _ in 0..spec.warmup_iters {
                run()?;
            }
        }
        let rounds = spec.timed_iters * spec.repetitions;
        let mut samples = vec![Vec::with_capacity(rounds); runners.len()];
        for round in 0..rounds {
            for j in 0..runners.len() {
                let idx = (j + round) % runners.len();
                let start = Instant::now();
                (runners[idx].0)()?;
                samples[idx].push(start.elapsed().as_secs_f64() * 1e3);
            }
        }
        for ((v, (_, flops)), mut s) in spec.variants.iter().zip(&runners).zip(samples) {
            s.sort_by(|a, b| a.total_cmp(b));
            points.push(BenchPoint {
                variant: v.clone(),
                n,
                c: spec.dim,
                median_ms: quantile(&s, 0.5),
                q1_ms: quantile(&s, 0.25),
                q3_ms: quantile(&s, 0.75),
                flops: *flops,
                samples: s.len(),
            });
        }
    }

    let mut slopes = Vec::new();
    let mut notices = Vec::new();
    for v in &spec.variants {
        let pts: Vec<(f64, f64)> = points
            .iter()
            .filter(|p| &p.variant == v)
            .map(|p| (p.n as f64, p.median_ms))
            .collect();
        match fit_scaling_exponent(&pts, spec.bootstrap, spec.seed) {
            Ok((slope, (lo, hi))) => slopes.push(SlopeFit {
                variant: v.clone(),
                c: spec.dim,
                slope,
                ci_lo: lo,
                ci_hi: hi,
            }),
            Err(SlabError::InsufficientPoints { needed, got }) => {
                notices.push(format!("{v}: no slope fitted ({got} sweep points, {needed} needed)"));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(BenchReport {
        target: spec.target,
        points,
        slopes,
        env: env_meta(spec),
        notices,
    })
}

/// Whether the IQRs of `a` and `b` are disjoint.
pub fn iqr_disjoint(a: &BenchPoint, b: &BenchPoint) -> bool {
    a.q3_ms < b.q1_ms || b.q3_ms < a.q1_ms
}

// ---- output ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = SlabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(SlabError::Config {
                section: "bench".into(),
                message: format!("unknown format {s:?}; valid formats: csv, json"),
            }),
        }
    }
}

/// One output row: a timed point (slope fields empty) or a fitted slope
/// (point fields empty).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub target: String,
    pub variant: String,
    #[serde(rename = "N")]
    pub n: Option<usize>,
    #[serde(rename = "C")]
    pub c: usize,
    pub median_ms: Option<f64>,
    pub iqr_ms: Option<f64>,
    pub flops: Option<u64>,
    pub slope: Option<f64>,
    pub slope_ci_lo: Option<f64>,
    pub slope_ci_hi: Option<f64>,
}

pub const REPORT_COLUMNS: [&str; 10] = [
    "target",
    "variant",
    "N",
    "C",
    "median_ms",
    "iqr_ms",
    "flops",
    "slope",
    "slope_ci_lo",
    "slope_ci_hi",
];

pub fn report_rows(report: &BenchReport) -> Vec<ReportRow> {
    let target = report.target.name().to_string();
    let mut rows: Vec<ReportRow> = report
        .points
        .iter()
        .map(|p| ReportRow {
            target: target.clone(),
            variant: p.variant.clone(),
            n: Some(p.n),
            c: p.c,
            median_ms: Some(p.median_ms),
            iqr_ms: Some(p.iqr_ms()),
            flops: Some(p.flops),
            slope: None,
            slope_ci_lo: None,
            slope_ci_hi: None,
        })
        .collect();
    rows.extend(report.slopes.iter().map(|s| ReportRow {
        target: target.clone(),
        variant: s.variant.clone(),
        n: None,
        c: s.c,
        median_ms: None,
        iqr_ms: None,
        flops: None,
        slope: Some(s.slope),
        slope_ci_lo: Some(s.ci_lo),
        slope_ci_hi: Some(s.ci_hi),
    }));
    rows
}

#[derive(Serialize, Deserialize)]
struct JsonReport {
    env: Option<EnvMeta>,
    notices: Vec<String>,
    rows: Vec<ReportRow>,
}

fn csv_err(path: &Path, e: csv::Error) -> SlabError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SlabError::io(path, io),
        other => SlabError::Data(format!("{}: {other:?}", path.display())),
    }
}

/// Writes `report` to `path` and a matplotlib script next to it that plots
/// latency against `N` on log-log axes. Returns the script path.
pub fn emit_report(report: &BenchReport, format: ReportFormat, path: &Path) -> Result<PathBuf> {
    let rows = report_rows(report);
    match format {
        ReportFormat::Csv => {
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_path(path)
                .map_err(|e| csv_err(path, e))?;
            w.write_record(REPORT_COLUMNS).map_err(|e| csv_err(path, e))?;
            for r in &rows {
                w.serialize(r).map_err(|e| csv_err(path, e))?;
            }
            w.flush().map_err(|e| SlabError::io(path, e))?;
        }
        ReportFormat::Json => {
            let doc = JsonReport {
                env: Some(report.env.clone()),
                notices: report.notices.clone(),
                rows,
            };
            let text = serde_json::to_string_pretty(&doc).map_err(|e| SlabError::Data(e.to_string()))?;
            std::fs::write(path, text).map_err(|e| SlabError::io(path, e))?;
        }
    }
    let script = plot_script_path(path);
    let mut f = std::fs::File::create(&script).map_err(|e| SlabError::io(&script, e))?;
    f.write_all(plot_script(path, format).as_bytes())
        .map_err(|e| SlabError::io(&script, e))?;
    Ok(script)
}

pub fn plot_script_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    path.with_file_name(format!("{stem}_plot.py"))
}

fn plot_script(path: &Path, format: ReportFormat) -> String {
    let file = path.file_name().and_then(|s| s.to_str()).unwrap_or("report.csv");
    let loader = match format {
        ReportFormat::Csv => "    with open(path, newline='') as f:\n        rows = list(csv.DictReader(f))\n",
        ReportFormat::Json => "    with open(path) as f:\n        rows = json.load(f)['rows']\n",
    };
    format!(
        r#"#!/usr/bin/env python3
# Latency vs sequence length, log-log. Usage: python3 {stem}_plot.py [data] [out.png]
import csv
import json
import os
import sys
from collections import defaultdict

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt


def load(path):
{loader}    return rows


def num(v):
    return None if v in (None, '') else float(v)


def main():
    here = os.path.dirname(os.path.abspath(__file__))
    path = sys.argv[1] if len(sys.argv) > 1 else os.path.join(here, {file:?})
    out = sys.argv[2] if len(sys.argv) > 2 else os.path.splitext(path)[0] + '.png'
    series = defaultdict(list)
    slopes = {{}}
    for r in load(path):
        if num(r['N']) is not None:
            series[r['variant']].append((num(r['N']), num(r['median_ms']), num(r['iqr_ms'])))
        elif num(r['slope']) is not None:
            slopes[r['variant']] = num(r['slope'])
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, pts in sorted(series.items()):
        pts.sort()
        xs, ys, iq = zip(*pts)
        label = name if name not in slopes else '%s (slope %.2f)' % (name, slopes[name])
        ax.errorbar(xs, ys, yerr=[q / 2 for q in iq], marker='o', capsize=3, label=label)
    ax.set_xscale('log', base=2)
    ax.set_yscale('log')
    ax.set_xlabel('tokens N')
    ax.set_ylabel('median latency (ms)')
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    print(out)


if __name__ == '__main__':
    main()
"#,
        stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report"),
    )
}

/// Parses a CSV report written by [`emit_report`].
pub fn read_csv_rows(path: &Path) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    rdr.deserialize()
        .collect::<std::result::Result<Vec<ReportRow>, _>>()
        .map_err(|e| csv_err(path, e))
}

/// Parses a JSON report written by [`emit_report`].
pub fn read_json_rows(path: &Path) -> Result<Vec<ReportRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| SlabError::io(path, e))?;
    let doc: JsonReport = serde_json::from_str(&text).map_err(|e| SlabError::Data(e.to_string()))?;
    Ok(doc.rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn power_law(c: f64, p: f64, noise: f64, seed: u64) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        [256.0, 512.0, 1024.0, 2048.0, 4096.0, 8192.0]
            .iter()
            .map(|&n: &f64| (n, c * n.powf(p) * (1.0 + rng.gen_range(-noise..=noise))))
            .collect()
    }

    #[test]
    fn exact_power_laws_fit_exactly() {
        let (s2, (lo, hi)) = fit_scaling_exponent(&power_law(3e-6, 2.0, 0.0, 0), 200, 1).unwrap();
        assert!((s2 - 2.0).abs() < 1e-12);
        assert!((lo - 2.0).abs() < 1e-9 && (hi - 2.0).abs() < 1e-9);
        let (s1, _) = fit_scaling_exponent(&power_law(0.5, 1.0, 0.0, 0), 200, 1).unwrap();
        assert!((s1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noisy_power_law_stays_in_band() {
        for seed in 0..200 {
            let (s, (lo, hi)) = fit_scaling_exponent(&power_law(1e-5, 2.0, 0.05, seed), 200, seed).unwrap();
            assert!((1.9..=2.1).contains(&s), "seed {seed}: {s}");
            assert!(lo <= s && s <= hi);
        }
    }

    #[test]
    fn fit_rejects_bad_input() {
        let pts = power_law(1.0, 1.0, 0.0, 0);
        assert!(matches!(
            fit_scaling_exponent(&pts[..3], 10, 0),
            Err(SlabError::InsufficientPoints { needed: 4, got: 3 })
        ));
        let mut bad = pts.clone();
        bad[2].1 = 0.0;
        assert!(matches!(fit_scaling_exponent(&bad, 10, 0), Err(SlabError::NonPositiveLatency(_))));
    }

    #[test]
    fn grids_are_exact_and_squarish() {
        assert_eq!(grid_for(256), TokenGrid::new(16, 16));
        assert_eq!(grid_for(512), TokenGrid::new(16, 32));
        assert_eq!(grid_for(7), TokenGrid::new(1, 7));
        for n in 1..300 {
            assert_eq!(grid_for(n).tokens(), n);
        }
    }

    fn quick(target: BenchTarget, seq: Vec<usize>, variants: &[&str]) -> BenchSpec {
        BenchSpec {
            target,
            variants: variants.iter().map(|s| s.to_string()).collect(),
            seq_lens: seq,
            dim: 8,
            heads: 2,
            warmup_iters: 1,
            bootstrap: 50,
            ..BenchSpec::default()
        }
    }

    #[test]
    fn single_point_reports_latency_without_slope() {
        let r = run_sweep(&quick(BenchTarget::Attention, vec![16], &["softmax", "sla"])).unwrap();
        assert_eq!(r.points.len(), 2);
        assert!(r.slopes.is_empty());
        assert_eq!(r.notices.len(), 2);
        assert!(r.points.iter().all(|p| p.median_ms > 0.0 && p.samples == 30));
    }

    #[test]
    fn unknown_variant_lists_valid_ones() {
        let err = run_sweep(&quick(BenchTarget::Attention, vec![16], &["flash"])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("softmax") && msg.contains("sla"), "{msg}");
        let few = BenchSpec {
            timed_iters: 5,
            ..quick(BenchTarget::Attention, vec![16], &["sla"])
        };
        assert!(run_sweep(&few).is_err());
        let unsorted = quick(BenchTarget::Attention, vec![32, 16], &["sla"]);
        assert!(run_sweep(&unsorted).is_err());
    }

    #[test]
    fn flops_columns_match_count_flops() {
        for target in [BenchTarget::Attention, BenchTarget::Normalization, BenchTarget::FullBlock] {
            let vs: Vec<&str> = target.valid_variants().to_vec();
            let spec = quick(target, vec![8, 16, 32, 64], &vs);
            let r = run_sweep(&spec).unwrap();
            assert_eq!(r.slopes.len(), vs.len());
            for p in &r.points {
                let expect = match target {
                    BenchTarget::Attention => {
                        let kind = if p.variant == "softmax" { AttnKind::Softmax } else { AttnKind::Sla };
                        model::attention_macs(kind, grid_for(p.n), 8, 2, DEFAULT_DWC_KERNEL)
                    }
                    BenchTarget::Normalization => {
                        let per = match p.variant.as_str() {
                            "layernorm" => 3,
                            "batchnorm" => 1,
                            _ => 2,
                        };
                        per * (p.n * 8) as u64
                    }
                    BenchTarget::FullBlock => {
                        let mut cfg = block_config(&spec, p.n, NormKind::PRepBN);
                        match p.variant.as_str() {
                            "layernorm" => cfg.norm_kind = NormKind::LayerNorm,
                            "fused-bn" => {
                                cfg.norm_kind = NormKind::BatchNorm;
                                cfg.fused = true;
                            }
                            _ => {}
                        }
                        model::count_flops(&cfg).per_block.total
                    }
                };
                assert_eq!(p.flops, expect, "{target:?} {}", p.variant);
            }
        }
    }

    #[test]
    fn csv_and_json_round_trip_identically() {
        let r = run_sweep(&quick(BenchTarget::Attention, vec![8, 16, 32, 64], &["softmax", "sla"])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (c, j) = (dir.path().join("r.csv"), dir.path().join("r.json"));
        let sc = emit_report(&r, ReportFormat::Csv, &c).unwrap();
        emit_report(&r, ReportFormat::Json, &j).unwrap();
        assert!(sc.exists());
        let rows = report_rows(&r);
        assert_eq!(read_csv_rows(&c).unwrap(), rows);
        assert_eq!(read_json_rows(&j).unwrap(), rows);
        let header = std::fs::read_to_string(&c).unwrap();
        assert!(header.starts_with(&REPORT_COLUMNS.join(",")));
    }

    #[test]
    fn empty_report_is_header_only() {
        let r = BenchReport {
            target: BenchTarget::Attention,
            points: vec![],
            slopes: vec![],
            env: env_meta(&BenchSpec::default()),
            notices: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        emit_report(&r, ReportFormat::Csv, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().trim(), REPORT_COLUMNS.join(","));
        assert!(read_csv_rows(&p).unwrap().is_empty());
    }
}
