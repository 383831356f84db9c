//! Self-check suites runnable from a release build.
//!
//! Each suite samples random instances, compares two code paths that must
//! agree, and reports the worst observed error against its tolerance.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{self, AttentionParams, TokenGrid};
use crate::error::{Result, SlabError};
use crate::gradcheck;
use crate::model::{self, AttnKind, Model, ModelConfig, NormKind};
use crate::normalization::{batchnorm_eval, reparam_repbn_to_bn, repbn_eval, BNParams, RepBNParams};
use crate::tensor::{Float, Tensor};

pub const LEMMA_TOL_F64: f64 = 1e-12;
pub const LEMMA_TOL_F32: f64 = 1e-6;
pub const SLA_TOL_F32: f64 = 1e-6;
pub const FUSION_TOL_F32: f64 = 1e-4;
pub const FUSION_TOL_F64: f64 = 1e-10;
/// Relative singular value cut-off for numerical rank.
pub const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    All,
    Lemma,
    Sla,
    Fusion,
    Gradcheck,
}

impl Suite {
    pub const NAMES: [&'static str; 5] = ["all", "lemma", "sla", "fusion", "gradcheck"];

    fn includes(self, other: Suite) -> bool {
        self == Suite::All || self == other
    }
}

impl std::str::FromStr for Suite {
    type Err = SlabError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Suite::All,
            "lemma" => Suite::Lemma,
            "sla" => Suite::Sla,
            "fusion" => Suite::Fusion,
            "gradcheck" => Suite::Gradcheck,
            _ => {
                return Err(SlabError::Config {
                    section: "verify".into(),
                    message: format!("unknown suite {s:?}; valid suites: {}", Suite::NAMES.join(", ")),
                })
            }
        })
    }
}

/// Deliberate faults for exercising the suites themselves.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FaultInjection {
    /// Added to η on the re-parameterized side of the lemma check only.
    pub eta_offset: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub fault: FaultInjection,
    pub gradcheck_probes: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            fault: FaultInjection::default(),
            gradcheck_probes: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub instances: usize,
    /// Worst observed error (or count, for rank checks).
    pub observed: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn within(suite: &'static str, name: impl Into<String>, instances: usize, observed: f64, tolerance: f64) -> Self {
        Self {
            suite,
            name: name.into(),
            instances,
            observed,
            tolerance,
            passed: observed <= tolerance,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub results: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed)
    }

    /// Fixed-width pass/fail table.
    pub fn table(&self) -> String {
        let w = self.results.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:<w$} {:>6} {:>12} {:>12}  result", "suite", "check", "n", "observed", "tolerance");
        for r in &self.results {
            let _ = writeln!(
                s,
                "{:<10} {:<w$} {:>6} {:>12.3e} {:>12.3e}  {}",
                r.suite,
                r.name,
                r.instances,
                r.observed,
                r.tolerance,
                if r.passed { "PASS" } else { "FAIL" }
            );
        }
        let failed = self.failures().count();
        let _ = writeln!(s, "{} checks, {} failed", self.results.len(), failed);
        s
    }
}

pub fn run(suite: Suite, opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    if suite.includes(Suite::Lemma) {
        report.results.extend(lemma_suite(1000, opts.seed, opts.fault));
    }
    if suite.includes(Suite::Sla) {
        report.results.extend(sla_suite(200, opts.seed)?);
    }
    if suite.includes(Suite::Fusion) {
        report.results.extend(fusion_suite(100, opts.seed)?);
    }
    if suite.includes(Suite::Gradcheck) {
        report.results.extend(gradcheck_suite(opts.gradcheck_probes, opts.seed)?);
    }
    Ok(report)
}

// ---- lemma -----------------------------------------------------------

/// Single-channel RepBN instance with `x` drawn from the BN's own running
/// distribution.
pub fn lemma_instance<R: Rng + ?Sized>(rng: &mut R) -> (RepBNParams<f64>, Tensor<f64>) {
    let mut p = RepBNParams::<f64>::new(1);
    let mu = rng.gen_range(-1.0..1.0);
    let var = rng.gen_range(0.25..4.0);
    p.bn.running_mean = Tensor::vector(vec![mu]);
    p.bn.running_var = Tensor::vector(vec![var]);
    p.bn.alpha = Tensor::vector(vec![rng.gen_range(-2.0..2.0)]);
    p.bn.beta = Tensor::vector(vec![rng.gen_range(-1.0..1.0)]);
    p.eta = Tensor::vector(vec![rng.gen_range(-1.0..1.0)]);
    let x = Tensor::<f64>::randn(&[1, 1], (var + p.bn.eps).sqrt(), rng).map(|z| z + mu);
    (p, x)
}

fn cast_repbn<U: Float>(p: &RepBNParams<f64>) -> RepBNParams<U> {
    RepBNParams {
        bn: BNParams {
            alpha: p.bn.alpha.cast(),
            beta: p.bn.beta.cast(),
            running_mean: p.bn.running_mean.cast(),
            running_var: p.bn.running_var.cast(),
            eps: p.bn.eps,
            momentum: p.bn.momentum,
        },
        eta: p.eta.cast(),
    }
}

fn lemma_error<U: Float>(p: &RepBNParams<f64>, x: &Tensor<f64>, fault: FaultInjection) -> Result<f64> {
    let pu = cast_repbn::<U>(p);
    let xu = x.cast::<U>();
    let mut faulty = pu.clone();
    if let Some(d) = fault.eta_offset {
        faulty.eta = faulty.eta.map(|e| e + U::c(d));
    }
    let bn = reparam_repbn_to_bn(&faulty);
    Ok(repbn_eval(&xu, &pu)?.max_abs_diff(&batchnorm_eval(&xu, &bn)?))
}

/// Worst |RepBN − re-parameterized BN| over `trials` instances, in 64-bit
/// and 32-bit.
pub fn lemma_max_errors(trials: usize, seed: u64, fault: FaultInjection) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut w64, mut w32) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let (p, x) = lemma_instance(&mut rng);
        w64 = w64.max(lemma_error::<f64>(&p, &x, fault)?);
        w32 = w32.max(lemma_error::<f32>(&p, &x, fault)?);
    }
    Ok((w64, w32))
}

fn lemma_suite(trials: usize, seed: u64, fault: FaultInjection) -> Vec<CheckResult> {
    match lemma_max_errors(trials, seed, fault) {
        Ok((w64, w32)) => vec![
            CheckResult::within("lemma", "repbn_as_bn_f64", trials, w64, LEMMA_TOL_F64),
            CheckResult::within("lemma", "repbn_as_bn_f32", trials, w32, LEMMA_TOL_F32),
        ],
        Err(_) => vec![CheckResult::within("lemma", "repbn_as_bn", trials, f64::INFINITY, LEMMA_TOL_F64)],
    }
}

// ---- sla -------------------------------------------------------------

/// Random attention instance: grid with at most 64 tokens, at most 32
/// channels, 1 to 4 heads, unit-scale inputs and projections.
pub fn sla_instance<R: Rng + ?Sized>(rng: &mut R) -> Result<(Tensor<f32>, AttentionParams<f32>, TokenGrid)> {
    let heads = rng.gen_range(1..=4);
    let c = heads * rng.gen_range(1..=32 / heads);
    let gh = rng.gen_range(1..=8);
    let gw = rng.gen_range(1..=8);
    let grid = TokenGrid::new(gh, gw);
    let mut p = AttentionParams::<f64>::init(c, heads, 3, rng)?;
    p.dwc_kernel = Tensor::randn(&[c, 3, 3], 1.0 / 3.0, rng);
    let x = Tensor::<f64>::randn(&[grid.tokens(), c], 1.0, rng);
    let p32 = AttentionParams {
        w_q: p.w_q.cast(),
        w_k: p.w_k.cast(),
        w_v: p.w_v.cast(),
        w_o: p.w_o.cast(),
        dwc_kernel: p.dwc_kernel.cast(),
        heads,
        eps_denom: p.eps_denom,
        qkv_bias: None,
    };
    Ok((x.cast(), p32, grid))
}

/// Worst |decoupled SLA − quadratic oracle| in 32-bit over `trials`
/// instances.
pub fn sla_max_error(trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (x, p, grid) = sla_instance(&mut rng)?;
        let fast = attention::sla_attention(&x, &p, grid)?;
        let slow = attention::sla_naive_oracle(&x, &p, grid)?;
        worst = worst.max(fast.max_abs_diff(&slow));
    }
    Ok(worst)
}

/// Largest numerical rank of per-head SLA similarity matrices minus the
/// head dim, over `trials` instances with `N > d`. Non-positive means the
/// bound held everywhere.
pub fn sla_rank_excess(trials: usize, seed: u64) -> Result<i64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = i64::MIN;
    for _ in 0..trials {
        let heads = rng.gen_range(1..=4);
        let d = rng.gen_range(1..=8);
        let n = rng.gen_range(d + 1..=48);
        let x = Tensor::<f64>::randn(&[n, heads * d], 1.0, &mut rng);
        let p = AttentionParams::<f64>::init(heads * d, heads, 3, &mut rng)?;
        for h in 0..heads {
            let sim = attention::sla_similarity(&x, &p, h)?;
            let r = attention::attention_map_rank(&sim, RANK_TOL)? as i64;
            worst = worst.max(r - d as i64);
        }
    }
    Ok(worst)
}

fn sla_suite(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let err = sla_max_error(trials, seed)?;
    let excess = sla_rank_excess(20, seed)?;
    // A softmax map on the same sizes escapes the bound.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (n, d) = (32, 4);
    let x = Tensor::<f64>::randn(&[n, d], 1.0, &mut rng);
    let p = AttentionParams::<f64>::init(d, 1, 3, &mut rng)?;
    let soft = attention::attention_map_rank(&attention::softmax_attention_map(&x, &p, 0)?, RANK_TOL)?;
    Ok(vec![
        CheckResult::within("sla", "decoupled_vs_quadratic_f32", trials, err, SLA_TOL_F32),
        CheckResult::within("sla", "similarity_rank_minus_head_dim", 20, excess as f64, 0.0),
        CheckResult {
            suite: "sla",
            name: "softmax_rank_exceeds_head_dim".into(),
            instances: 1,
            observed: soft as f64,
            tolerance: d as f64,
            passed: soft > d,
        },
    ])
}

// ---- fusion ----------------------------------------------------------

/// Small PRepBN model at γ = 0 with random running statistics, η and
/// affine terms, as training would leave them.
pub fn converged_model(attn_kind: AttnKind, seed: u64) -> Result<Model<f64>> {
    let cfg = ModelConfig {
        depth: 2,
        dim: 16,
        heads: 2,
        mlp_ratio: 2.0,
        norm_kind: NormKind::PRepBN,
        attn_kind,
        grid: TokenGrid::new(3, 3),
        num_classes: 5,
        patch_size: 2,
        in_channels: 3,
        decay_steps: 3,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model::<f64>::init(&cfg, &mut rng)?;
    for nt in m.named_tensors_mut() {
        let shape = nt.tensor.shape().to_vec();
        let n = nt.name;
        if n.ends_with("running_var") {
            *nt.tensor = Tensor::uniform(&shape, 0.3, 3.0, &mut rng);
        } else if n.ends_with("running_mean") || n.ends_with("eta") || n.ends_with("beta") {
            *nt.tensor = Tensor::randn(&shape, 0.5, &mut rng);
        } else if n.ends_with("alpha") {
            *nt.tensor = Tensor::uniform(&shape, 0.5, 1.5, &mut rng);
        }
    }
    for _ in 0..cfg.decay_steps {
        m.advance_schedules();
    }
    Ok(m)
}

/// Worst |fused − unfused| eval logit over `batches` random batches.
pub fn fusion_max_error<T: Float>(m: &Model<T>, batches: usize, seed: u64) -> Result<f64> {
    probe_difference(m, &model::fuse_model(m)?, batches, seed)
}

/// Worst eval logit difference between two models of the same input shape
/// over `batches` random batches of 4 images.
pub fn probe_difference<T: Float>(a: &Model<T>, b: &Model<T>, batches: usize, seed: u64) -> Result<f64> {
    let (h, w) = a.config.image_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..batches {
        let x = Tensor::<T>::randn(&[4, a.config.in_channels, h, w], 1.0, &mut rng);
        worst = worst.max(b.forward(&x)?.max_abs_diff(&a.forward(&x)?));
    }
    Ok(worst)
}

fn fusion_suite(batches: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (i, kind) in [AttnKind::Sla, AttnKind::Softmax].into_iter().enumerate() {
        let m = converged_model(kind, seed.wrapping_add(i as u64))?;
        let tag = match kind {
            AttnKind::Sla => "sla",
            AttnKind::Softmax => "softmax",
        };
        let e64 = fusion_max_error(&m, batches, seed)?;
        let e32 = fusion_max_error(&m.cast::<f32>(), batches, seed)?;
        out.push(CheckResult::within("fusion", format!("{tag}_logits_f64"), batches, e64, FUSION_TOL_F64));
        out.push(CheckResult::within("fusion", format!("{tag}_logits_f32"), batches, e32, FUSION_TOL_F32));
        let fused = model::fuse_model(&m)?;
        let again = model::fuse_model(&fused)?;
        out.push(CheckResult {
            suite: "fusion",
            name: format!("{tag}_refuse_is_noop"),
            instances: 1,
            observed: if again == fused { 0.0 } else { 1.0 },
            tolerance: 0.0,
            passed: again == fused,
        });
    }
    Ok(out)
}

// ---- gradcheck -------------------------------------------------------

fn gradcheck_suite(probes: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut checks = gradcheck::op_suite(probes, seed)?;
    checks.extend(gradcheck::model_suite(probes.min(30), seed)?);
    Ok(checks
        .into_iter()
        .map(|g| CheckResult {
            suite: "gradcheck",
            name: g.name,
            instances: g.probes,
            observed: g.max_rel_err,
            tolerance: gradcheck::DEFAULT_TOLERANCE,
            passed: g.passed,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lemma_suite_passes_and_catches_a_perturbed_eta() {
        let ok = run(Suite::Lemma, &VerifyOptions::default()).unwrap();
        assert!(ok.all_passed(), "{}", ok.table());
        let opts = VerifyOptions {
            fault: FaultInjection { eta_offset: Some(1e-3) },
            ..VerifyOptions::default()
        };
        let bad = run(Suite::Lemma, &opts).unwrap();
        assert!(!bad.all_passed());
        // An offset δ on η shifts the re-parameterized output by exactly δ·x.
        for r in bad.failures() {
            assert!(r.observed > 1e-4, "{r:?}");
        }
        assert!(bad.table().contains("FAIL"));
    }

    #[test]
    fn sla_and_fusion_suites_pass() {
        let r = run(Suite::Sla, &VerifyOptions::default()).unwrap();
        println!("{}", r.table());
        assert!(r.all_passed());
        let r = run(Suite::Fusion, &VerifyOptions::default()).unwrap();
        println!("{}", r.table());
        assert!(r.all_passed());
    }

    #[test]
    fn suite_names_parse() {
        for n in Suite::NAMES {
            assert!(n.parse::<Suite>().is_ok());
        }
        let e = "lema".parse::<Suite>().unwrap_err().to_string();
        assert!(e.contains("lemma") && e.contains("gradcheck"), "{e}");
    }
}
