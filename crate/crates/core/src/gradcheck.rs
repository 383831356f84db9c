//! Central finite-difference checks of tape gradients.
//!
//! Each probe picks a random direction `u` over all inputs and compares the
//! analytic directional derivative `∇L·u` with
//! `(L(x + h·u) − L(x − h·u)) / 2h`, where `L = Σ w⊙f(x)` for a fixed random
//! weighting `w`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{self, AttentionVars, TokenGrid};
use crate::autodiff::{Tape, Var};
use crate::model::{AttnKind, Model, ModelConfig, NormKind};
use crate::normalization::DecaySchedule;
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-12 {
        return (a - b).abs();
    }
    (a - b).abs() / scale
}

fn weighted_loss<F>(f: &F, inputs: &[Tensor<f64>], weight: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = f(&mut tape, &vars)?;
    Ok(tape
        .value(y)
        .data()
        .iter()
        .zip(weight.data())
        .map(|(a, b)| a * b)
        .sum())
}

/// Checks `f` at `inputs` along `probes` random directions.
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], probes: usize, seed: u64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let weight = Tensor::<f64>::randn(tape.shape(y), 1.0, &mut rng);
    let w = tape.constant(weight.clone());
    let prod = tape.mul(y, w)?;
    let loss = tape.sum(prod);
    tape.backward(loss)?;
    let grads: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let h = DEFAULT_STEP;
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let dirs: Vec<Tensor<f64>> = inputs.iter().map(|t| Tensor::randn(t.shape(), 1.0, &mut rng)).collect();
        let analytic: f64 = grads
            .iter()
            .zip(&dirs)
            .map(|(g, u)| g.data().iter().zip(u.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let shifted = |sign: f64| -> Vec<Tensor<f64>> {
            inputs
                .iter()
                .zip(&dirs)
                .map(|(t, u)| t.zip_map(u, "gradcheck", |a, b| a + sign * h * b).expect("same shape"))
                .collect()
        };
        let plus = weighted_loss(&f, &shifted(1.0), &weight)?;
        let minus = weighted_loss(&f, &shifted(-1.0), &weight)?;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(rel_err(analytic, numeric));
    }
    Ok(GradCheck {
        name: name.to_string(),
        probes,
        max_rel_err: worst,
        passed: worst <= DEFAULT_TOLERANCE,
    })
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 0.5, 2.0, rng)
}

fn attention_vars(v: &[Var], heads: usize) -> AttentionVars {
    AttentionVars {
        w_q: v[1],
        w_k: v[2],
        w_v: v[3],
        w_o: v[4],
        dwc_kernel: v[5],
        qkv_bias: None,
        heads,
    }
}

fn attention_inputs(batch: usize, n: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let s = 1.0 / (c as f64).sqrt();
    vec![
        randn(&[batch * n, c], rng),
        Tensor::randn(&[c, c], s, rng),
        Tensor::randn(&[c, c], s, rng),
        Tensor::randn(&[c, c], s, rng),
        Tensor::randn(&[c, c], s, rng),
        Tensor::randn(&[c, 3, 3], 0.3, rng),
    ]
}

/// Gradient checks of every differentiable tape operation.
pub fn op_suite(probes: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut s = seed;
    let mut next = || {
        s = s.wrapping_add(1);
        s
    };

    let (a, b) = (randn(&[3, 4], &mut rng), randn(&[3, 4], &mut rng));
    out.push(check("add", &[a.clone(), b.clone()], probes, next(), |t, v| t.add(v[0], v[1]))?);
    out.push(check("sub", &[a.clone(), b.clone()], probes, next(), |t, v| t.sub(v[0], v[1]))?);
    out.push(check("mul", &[a.clone(), b.clone()], probes, next(), |t, v| t.mul(v[0], v[1]))?);
    out.push(check("scale", &[a.clone()], probes, next(), |t, v| Ok(t.scale(v[0], -1.7)))?);
    let row = randn(&[4], &mut rng);
    out.push(check("add_row", &[a.clone(), row.clone()], probes, next(), |t, v| t.add_row(v[0], v[1]))?);
    out.push(check("mul_row", &[a.clone(), row.clone()], probes, next(), |t, v| t.mul_row(v[0], v[1]))?);
    out.push(check("relu", &[a.clone()], probes, next(), |t, v| Ok(t.relu(v[0])))?);
    out.push(check("gelu", &[a.clone()], probes, next(), |t, v| Ok(t.gelu(v[0])))?);
    out.push(check("softmax_lastdim", &[a.clone()], probes, next(), |t, v| Ok(t.softmax_lastdim(v[0])))?);
    out.push(check("sum", &[a.clone()], probes, next(), |t, v| Ok(t.sum(v[0])))?);
    out.push(check("mean", &[a.clone()], probes, next(), |t, v| Ok(t.mean(v[0])))?);

    let g3 = randn(&[2, 3, 4], &mut rng);
    out.push(check("sum_axis1", &[g3.clone()], probes, next(), |t, v| t.sum_axis1(v[0]))?);
    let den = positive(&[2, 3, 1], &mut rng);
    out.push(check("row_div", &[g3.clone(), den], probes, next(), |t, v| t.row_div(v[0], v[1], 1e-6))?);

    let m = randn(&[4, 5], &mut rng);
    out.push(check("matmul", &[a.clone(), m.clone()], probes, next(), |t, v| t.matmul(v[0], v[1]))?);
    let (p, q) = (randn(&[2, 3, 4], &mut rng), randn(&[2, 5, 4], &mut rng));
    out.push(check("matmul_nt", &[p.clone(), q.clone()], probes, next(), |t, v| {
        t.matmul_t(v[0], false, v[1], true)
    })?);
    let r = randn(&[2, 3, 5], &mut rng);
    out.push(check("matmul_tn", &[p.clone(), r], probes, next(), |t, v| t.matmul_t(v[0], true, v[1], false))?);
    out.push(check("transpose", &[a.clone()], probes, next(), |t, v| t.transpose(v[0]))?);
    out.push(check("reshape", &[a.clone()], probes, next(), |t, v| t.reshape(v[0], &[2, 6]))?);
    let bias = randn(&[5], &mut rng);
    out.push(check("linear", &[a.clone(), m, bias], probes, next(), |t, v| {
        t.linear(v[0], v[1], Some(v[2]))
    })?);

    let (sc, sh) = (randn(&[4], &mut rng), randn(&[4], &mut rng));
    out.push(check("layernorm", &[a.clone(), sc.clone(), sh.clone()], probes, next(), |t, v| {
        t.layernorm(v[0], v[1], v[2], 1e-5)
    })?);
    let x6 = randn(&[6, 4], &mut rng);
    out.push(check("batchnorm_train", &[x6.clone(), sc.clone(), sh.clone()], probes, next(), |t, v| {
        t.batchnorm_train(v[0], v[1], v[2], 1e-5).map(|(y, _)| y)
    })?);
    let (mu, var) = (randn(&[4], &mut rng).into_data(), positive(&[4], &mut rng).into_data());
    out.push(check("batchnorm_eval", &[x6, sc, sh], probes, next(), move |t, v| {
        t.batchnorm_eval(v[0], v[1], v[2], &mu, &var, 1e-5)
    })?);

    let tokens = randn(&[2 * 12, 3], &mut rng);
    let kernel = randn(&[3, 3, 3], &mut rng);
    out.push(check("dwc_tokens", &[tokens, kernel.clone()], probes, next(), |t, v| {
        t.dwc_tokens(v[0], v[1], 2, 3, 4)
    })?);
    let chw = randn(&[3, 4, 5], &mut rng);
    out.push(check("depthwise_conv2d", &[chw, kernel], probes, next(), |t, v| t.depthwise_conv2d(v[0], v[1]))?);

    let xs = randn(&[2 * 3, 4], &mut rng);
    out.push(check("split_heads", &[xs.clone()], probes, next(), |t, v| t.split_heads(v[0], 2, 2))?);
    out.push(check("merge_heads", &[randn(&[4, 3, 2], &mut rng)], probes, next(), |t, v| {
        t.merge_heads(v[0], 2)
    })?);
    out.push(check("mean_pool", &[xs], probes, next(), |t, v| t.mean_pool(v[0], 2))?);
    let logits = randn(&[4, 5], &mut rng);
    out.push(check("cross_entropy", &[logits], probes, next(), |t, v| {
        t.cross_entropy(v[0], &[0, 3, 4, 1], 0.1)
    })?);

    let grid = TokenGrid::new(2, 3);
    let inputs = attention_inputs(2, 6, 4, &mut rng);
    out.push(check("softmax_attention", &inputs, probes, next(), |t, v| {
        let p = attention_vars(v, 2);
        attention::softmax_attention_tape(t, v[0], &p, 2)
    })?);
    out.push(check("sla_attention", &inputs, probes, next(), move |t, v| {
        let p = attention_vars(v, 2);
        attention::sla_attention_tape(t, v[0], &p, 2, grid, 1e-6)
    })?);
    Ok(out)
}

fn model_loss(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize]) -> Result<(Tape<f64>, Var, Vec<(String, Var)>)> {
    let mut tape = Tape::new();
    let fw = model.forward_tape(&mut tape, x, None)?;
    let loss = tape.cross_entropy(fw.logits, labels, 0.1)?;
    Ok((tape, loss, fw.params))
}

/// Checks the gradient of the label-smoothed training loss with respect to
/// every learnable tensor of `model`, perturbing all of them at once.
pub fn check_model(name: &str, model: &Model<f64>, x: &Tensor<f64>, labels: &[usize], probes: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut tape, loss, params) = model_loss(model, x, labels)?;
    tape.backward(loss)?;
    let grads: Vec<(String, Tensor<f64>)> = params
        .iter()
        .map(|(n, v)| {
            let g = tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(*v)));
            (n.clone(), g)
        })
        .collect();
    let h = DEFAULT_STEP;
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let dirs: Vec<Tensor<f64>> = grads.iter().map(|(_, g)| Tensor::randn(g.shape(), 1.0, &mut rng)).collect();
        let analytic: f64 = grads
            .iter()
            .zip(&dirs)
            .map(|((_, g), u)| g.data().iter().zip(u.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let eval = |sign: f64| -> Result<f64> {
            let mut m = model.clone();
            for nt in m.named_tensors_mut() {
                if let Some(i) = grads.iter().position(|(n, _)| *n == nt.name) {
                    for (w, &d) in nt.tensor.data_mut().iter_mut().zip(dirs[i].data()) {
                        *w += sign * h * d;
                    }
                }
            }
            let (tape, loss, _) = model_loss(&m, x, labels)?;
            Ok(tape.value(loss).item())
        };
        let numeric = (eval(1.0)? - eval(-1.0)?) / (2.0 * h);
        worst = worst.max(rel_err(analytic, numeric));
    }
    Ok(GradCheck {
        name: name.to_string(),
        probes,
        max_rel_err: worst,
        passed: worst <= DEFAULT_TOLERANCE,
    })
}

/// Whole-model checks for each normalization, including a progressive norm
/// halfway through its decay.
pub fn model_suite(probes: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = ModelConfig {
        depth: 2,
        dim: 4,
        heads: 2,
        mlp_ratio: 2.0,
        grid: TokenGrid::new(2, 2),
        num_classes: 3,
        patch_size: 1,
        in_channels: 2,
        decay_steps: 10,
        schedule: DecaySchedule::Linear,
        ..ModelConfig::default()
    };
    let x = Tensor::<f64>::randn(&[3, 4, 2], 1.0, &mut rng);
    let labels = [0, 2, 1];
    let mut out = Vec::new();
    for (name, norm_kind, attn_kind, step) in [
        ("model_layernorm_softmax", NormKind::LayerNorm, AttnKind::Softmax, 0),
        ("model_batchnorm_sla", NormKind::BatchNorm, AttnKind::Sla, 0),
        ("model_prepbn_blend_sla", NormKind::PRepBN, AttnKind::Sla, 5),
        ("model_prepbn_repbn_softmax", NormKind::PRepBN, AttnKind::Softmax, 10),
    ] {
        let cfg = ModelConfig {
            norm_kind,
            attn_kind,
            ..base.clone()
        };
        let mut m = Model::<f64>::init(&cfg, &mut rng)?;
        for b in &mut m.blocks {
            b.attn.dwc_kernel = Tensor::randn(b.attn.dwc_kernel.shape(), 0.3, &mut rng);
        }
        for nt in m.named_tensors_mut() {
            if nt.name.ends_with("eta") || nt.name.ends_with("shift") || nt.name.ends_with("beta") {
                *nt.tensor = Tensor::randn(nt.tensor.shape(), 0.5, &mut rng);
            }
        }
        for _ in 0..step {
            m.advance_schedules();
        }
        out.push(check_model(name, &m, &x, &labels, probes, rng.next_u64())?);
    }
    Ok(out)
}
