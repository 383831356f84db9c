//! Pre-norm isotropic transformer classifier.
//!
//! Patches are embedded by a linear projection, run through `depth` blocks of
//! the form
//!
//! ```text
//! x ← x + DropPath(Attn(Norm₁(x)))
//! x ← x + DropPath(MLP(Norm₂(x)))
//! ```
//!
//! then normalized, mean-pooled over tokens and classified. There is no
//! class token and no positional embedding.
//!
//! Activations are stored as `[batch·tokens × dim]` so batch statistics are
//! taken over samples and tokens jointly.

use std::borrow::Cow;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionParams, AttentionVars, TokenGrid, DEFAULT_DWC_KERNEL};
use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Result, SlabError};
use crate::normalization::{
    self as norm, BNParams, DecaySchedule, LNParams, Mode, PRepBNState, StatisticsRecalibration,
};
use crate::tensor::{ops, DType, Float, Tensor};
use crate::training::{droppath, droppath_mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    LayerNorm,
    PRepBN,
    BatchNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnKind {
    Softmax,
    Sla,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub norm_kind: NormKind,
    pub attn_kind: AttnKind,
    pub droppath_rate: f64,
    /// Patch grid; `grid.tokens()` tokens per sample.
    pub grid: TokenGrid,
    pub num_classes: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub dwc_kernel: usize,
    pub schedule: DecaySchedule,
    /// Steps of the LN → RepBN decay.
    pub decay_steps: u64,
    /// Set once the normalizations have been folded into linear layers.
    #[serde(default)]
    pub fused: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            dim: 64,
            heads: 2,
            mlp_ratio: 4.0,
            norm_kind: NormKind::PRepBN,
            attn_kind: AttnKind::Sla,
            droppath_rate: 0.0,
            grid: TokenGrid::new(4, 4),
            num_classes: 10,
            patch_size: 4,
            in_channels: 3,
            dwc_kernel: DEFAULT_DWC_KERNEL,
            schedule: DecaySchedule::Linear,
            decay_steps: 0,
            fused: false,
        }
    }
}

impl ModelConfig {
    pub fn tokens(&self) -> usize {
        self.grid.tokens()
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Input image side lengths `(height, width)`.
    pub fn image_size(&self) -> (usize, usize) {
        (self.grid.height * self.patch_size, self.grid.width * self.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| {
            Err(SlabError::Config {
                section: "model".into(),
                message: m,
            })
        };
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if !(0.0..1.0).contains(&self.droppath_rate) {
            return bad(format!("droppath_rate {} outside [0, 1)", self.droppath_rate));
        }
        if !(self.mlp_ratio > 0.0) || self.hidden() == 0 {
            return bad(format!("mlp_ratio {} gives an empty hidden layer", self.mlp_ratio));
        }
        if self.grid.tokens() == 0 {
            return bad("grid must hold at least one token".into());
        }
        if self.num_classes == 0 || self.patch_size == 0 || self.in_channels == 0 {
            return bad("num_classes, patch_size and in_channels must be positive".into());
        }
        if self.dwc_kernel % 2 == 0 {
            return bad(format!("dwc_kernel {} must be odd", self.dwc_kernel));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Norm<T> {
    Layer(LNParams<T>),
    Batch(BNParams<T>),
    Progressive(PRepBNState<T>),
    /// Folded into the consuming linear layer.
    Identity,
}

impl<T: Float> Norm<T> {
    fn new(cfg: &ModelConfig) -> Self {
        if cfg.fused {
            return Norm::Identity;
        }
        match cfg.norm_kind {
            NormKind::LayerNorm => Norm::Layer(LNParams::new(cfg.dim)),
            NormKind::BatchNorm => Norm::Batch(BNParams::new(cfg.dim)),
            NormKind::PRepBN => Norm::Progressive(PRepBNState::new(cfg.dim, cfg.decay_steps, cfg.schedule)),
        }
    }

    pub fn eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Norm::Layer(p) => norm::layernorm(x, p),
            Norm::Batch(p) => norm::batchnorm_eval(x, p),
            Norm::Progressive(s) => norm::prepbn_eval(x, s),
            Norm::Identity => Ok(x.clone()),
        }
    }

    /// Like [`Norm::eval`] but borrows the input when there is nothing to do.
    pub fn eval_cow<'a>(&self, x: &'a Tensor<T>) -> Result<Cow<'a, Tensor<T>>> {
        match self {
            Norm::Identity => Ok(Cow::Borrowed(x)),
            _ => self.eval(x).map(Cow::Owned),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            Norm::Layer(p) => norm::layernorm(x, p),
            Norm::Batch(p) => norm::batchnorm(x, p, mode),
            Norm::Progressive(s) => norm::prepbn(x, s, mode),
            Norm::Identity => Ok(x.clone()),
        }
    }

    pub fn gamma(&self) -> Option<f64> {
        match self {
            Norm::Progressive(s) => Some(norm::gamma(s)),
            _ => None,
        }
    }

    fn bn_mut(&mut self) -> Option<&mut BNParams<T>> {
        match self {
            Norm::Batch(p) => Some(p),
            Norm::Progressive(s) => Some(&mut s.repbn.bn),
            _ => None,
        }
    }

    /// The eval-mode transform as a plain BatchNorm, when one exists.
    fn as_batchnorm(&self) -> Option<BNParams<T>> {
        match self {
            Norm::Batch(p) => Some(p.clone()),
            Norm::Progressive(s) => Some(norm::reparam_repbn_to_bn(&s.repbn)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
}

impl<T: Float> Mlp<T> {
    fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1_w: Tensor::randn(&[dim, hidden], 1.0 / (dim as f64).sqrt(), rng),
            fc1_b: Tensor::zeros(&[hidden]),
            fc2_w: Tensor::randn(&[hidden, dim], 1.0 / (hidden as f64).sqrt(), rng),
            fc2_b: Tensor::zeros(&[dim]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = ops::gelu(&ops::linear(x, &self.fc1_w, Some(&self.fc1_b))?);
        ops::linear(&h, &self.fc2_w, Some(&self.fc2_b))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub norm1: Norm<T>,
    pub attn: AttentionParams<T>,
    pub norm2: Norm<T>,
    pub mlp: Mlp<T>,
}

/// How a plain (untaped) forward pass runs.
pub struct Pass<'a> {
    pub mode: Mode,
    pub batch: usize,
    pub grid: TokenGrid,
    pub attn_kind: AttnKind,
    pub droppath_rate: f64,
    /// Source of droppath masks; without it droppath is skipped.
    pub rng: Option<&'a mut dyn RngCore>,
}

fn attend<T: Float>(x: &Tensor<T>, p: &AttentionParams<T>, batch: usize, grid: TokenGrid, kind: AttnKind) -> Result<Tensor<T>> {
    let c = x.last_dim();
    if batch == 0 || x.rows() % batch != 0 {
        return Err(SlabError::shape("attention", format!("{:?} over {batch} samples", x.shape())));
    }
    let n = x.rows() / batch;
    if batch == 1 {
        return match kind {
            AttnKind::Softmax => attention::softmax_attention(x, p),
            AttnKind::Sla => attention::sla_attention(x, p, grid),
        };
    }
    let mut out = Vec::with_capacity(x.numel());
    for chunk in x.data().chunks(n * c) {
        let xs = Tensor::new(vec![n, c], chunk.to_vec())?;
        let y = match kind {
            AttnKind::Softmax => attention::softmax_attention(&xs, p)?,
            AttnKind::Sla => attention::sla_attention(&xs, p, grid)?,
        };
        out.extend_from_slice(y.data());
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn drop_branch<T: Float>(y: Tensor<T>, pass: &mut Pass<'_>) -> Result<Tensor<T>> {
    match pass.rng.as_mut() {
        Some(rng) if pass.mode == Mode::Train && pass.droppath_rate > 0.0 => {
            let shape = y.shape().to_vec();
            let n = y.rows() / pass.batch;
            let per_sample = y.reshape(&[pass.batch, n, shape[1]])?;
            droppath(&per_sample, pass.droppath_rate, pass.mode, &mut **rng).reshape(&shape)
        }
        _ => Ok(y),
    }
}

/// One pre-norm block on `[batch·N × C]` activations.
pub fn block_forward<T: Float>(x: &Tensor<T>, b: &mut Block<T>, pass: &mut Pass<'_>) -> Result<Tensor<T>> {
    let c = b.attn.dim();
    if x.ndim() != 2 || x.shape()[1] != c {
        return Err(SlabError::shape("block_forward", format!("input {:?} against dim {c}", x.shape())));
    }
    let h = b.norm1.forward(x, pass.mode)?;
    let a = drop_branch(attend(&h, &b.attn, pass.batch, pass.grid, pass.attn_kind)?, pass)?;
    let x = ops::add(x, &a)?;
    let h = b.norm2.forward(&x, pass.mode)?;
    let m = drop_branch(b.mlp.forward(&h)?, pass)?;
    ops::add(&x, &m)
}

/// Eval-mode block on `[batch·N × C]` activations.
pub fn block_eval<T: Float>(x: &Tensor<T>, b: &Block<T>, batch: usize, grid: TokenGrid, kind: AttnKind) -> Result<Tensor<T>> {
    let h = b.norm1.eval_cow(x)?;
    let x = ops::add(x, &attend(&h, &b.attn, batch, grid, kind)?)?;
    let h = b.norm2.eval_cow(&x)?;
    ops::add(&x, &b.mlp.forward(&h)?)
}

/// Splits `[B × C × H × W]` images into `[B × N × C·p·p]` patch rows, patches
/// in row-major grid order, each flattened channel-major.
pub fn patchify<T: Float>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || patch == 0 || s[2] % patch != 0 || s[3] % patch != 0 {
        return Err(SlabError::shape("patchify", format!("images {s:?} with patch {patch}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / patch, w / patch);
    let pd = c * patch * patch;
    let src = images.data();
    let mut out = vec![T::zero(); b * gh * gw * pd];
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let dst = &mut out[((bi * gh + gy) * gw + gx) * pd..][..pd];
                let mut o = 0;
                for ch in 0..c {
                    for py in 0..patch {
                        let row = ((bi * c + ch) * h + gy * patch + py) * w + gx * patch;
                        dst[o..o + patch].copy_from_slice(&src[row..row + patch]);
                        o += patch;
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, gh * gw, pd], out)
}

/// Reference to a named tensor and whether the optimizer updates it.
pub struct Named<R> {
    pub name: String,
    pub tensor: R,
    pub learnable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: Norm<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

/// Result of a recorded training forward pass.
pub struct TapeForward<T> {
    pub logits: Var,
    /// Every learnable tensor bound as a leaf, by name.
    pub params: Vec<(String, Var)>,
    /// Batch statistics seen by each batch norm, in [`Model::norms_mut`] order.
    pub stats: Vec<Option<BatchStats<T>>>,
}

struct Binder<'t, T> {
    tape: &'t mut Tape<T>,
    params: Vec<(String, Var)>,
}

impl<T: Float> Binder<'_, T> {
    fn bind(&mut self, name: String, t: &Tensor<T>) -> Var {
        let v = self.tape.leaf(t.clone());
        self.params.push((name, v));
        v
    }

    fn norm(&mut self, name: &str, n: &Norm<T>, x: Var) -> Result<(Var, Option<BatchStats<T>>)> {
        match n {
            Norm::Identity => Ok((x, None)),
            Norm::Layer(p) => {
                let s = self.bind(format!("{name}.ln.scale"), &p.scale);
                let b = self.bind(format!("{name}.ln.shift"), &p.shift);
                Ok((self.tape.layernorm(x, s, b, T::c(p.eps))?, None))
            }
            Norm::Batch(p) => {
                let a = self.bind(format!("{name}.bn.alpha"), &p.alpha);
                let b = self.bind(format!("{name}.bn.beta"), &p.beta);
                let (y, st) = self.tape.batchnorm_train(x, a, b, T::c(p.eps))?;
                Ok((y, Some(st)))
            }
            Norm::Progressive(s) => {
                let g = norm::gamma(s);
                let bn = &s.repbn.bn;
                let a = self.bind(format!("{name}.bn.alpha"), &bn.alpha);
                let b = self.bind(format!("{name}.bn.beta"), &bn.beta);
                let eta = self.bind(format!("{name}.eta"), &s.repbn.eta);
                let sc = self.bind(format!("{name}.ln.scale"), &s.ln.scale);
                let sh = self.bind(format!("{name}.ln.shift"), &s.ln.shift);
                let (y, st) = self.tape.batchnorm_train(x, a, b, T::c(bn.eps))?;
                if g == 1.0 {
                    return Ok((self.tape.layernorm(x, sc, sh, T::c(s.ln.eps))?, Some(st)));
                }
                let ex = self.tape.mul_row(x, eta)?;
                let rep = self.tape.add(y, ex)?;
                if g == 0.0 {
                    return Ok((rep, Some(st)));
                }
                let ln = self.tape.layernorm(x, sc, sh, T::c(s.ln.eps))?;
                let ln = self.tape.scale(ln, T::c(g));
                let rep = self.tape.scale(rep, T::c(1.0 - g));
                Ok((self.tape.add(ln, rep)?, Some(st)))
            }
        }
    }
}

macro_rules! norm_tensors {
    ($out:ident, $prefix:expr, $norm:expr, $($m:tt)?) => {{
        let prefix = $prefix;
        match $norm {
            Norm::Layer(p) => {
                $out.push(Named { name: format!("{prefix}.ln.scale"), tensor: & $($m)? p.scale, learnable: true });
                $out.push(Named { name: format!("{prefix}.ln.shift"), tensor: & $($m)? p.shift, learnable: true });
            }
            Norm::Batch(p) => {
                $out.push(Named { name: format!("{prefix}.bn.alpha"), tensor: & $($m)? p.alpha, learnable: true });
                $out.push(Named { name: format!("{prefix}.bn.beta"), tensor: & $($m)? p.beta, learnable: true });
                $out.push(Named { name: format!("{prefix}.bn.running_mean"), tensor: & $($m)? p.running_mean, learnable: false });
                $out.push(Named { name: format!("{prefix}.bn.running_var"), tensor: & $($m)? p.running_var, learnable: false });
            }
            Norm::Progressive(s) => {
                $out.push(Named { name: format!("{prefix}.ln.scale"), tensor: & $($m)? s.ln.scale, learnable: true });
                $out.push(Named { name: format!("{prefix}.ln.shift"), tensor: & $($m)? s.ln.shift, learnable: true });
                $out.push(Named { name: format!("{prefix}.bn.alpha"), tensor: & $($m)? s.repbn.bn.alpha, learnable: true });
                $out.push(Named { name: format!("{prefix}.bn.beta"), tensor: & $($m)? s.repbn.bn.beta, learnable: true });
                $out.push(Named { name: format!("{prefix}.bn.running_mean"), tensor: & $($m)? s.repbn.bn.running_mean, learnable: false });
                $out.push(Named { name: format!("{prefix}.bn.running_var"), tensor: & $($m)? s.repbn.bn.running_var, learnable: false });
                $out.push(Named { name: format!("{prefix}.eta"), tensor: & $($m)? s.repbn.eta, learnable: true });
            }
            Norm::Identity => {}
        }
    }};
}

impl<T: Float> Model<T> {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (c, k) = (config.dim, config.num_classes);
        let pd = config.patch_dim();
        let blocks = (0..config.depth)
            .map(|_| {
                let mut attn = AttentionParams::init(c, config.heads, config.dwc_kernel, rng)?;
                if config.fused {
                    attn.qkv_bias = Some([Tensor::zeros(&[c]), Tensor::zeros(&[c]), Tensor::zeros(&[c])]);
                }
                Ok(Block {
                    norm1: Norm::new(config),
                    attn,
                    norm2: Norm::new(config),
                    mlp: Mlp::init(c, config.hidden(), rng),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            patch_w: Tensor::randn(&[pd, c], 1.0 / (pd as f64).sqrt(), rng),
            patch_b: Tensor::zeros(&[c]),
            blocks,
            norm: Norm::new(config),
            head_w: Tensor::randn(&[c, k], 1.0 / (c as f64).sqrt(), rng),
            head_b: Tensor::zeros(&[k]),
        })
    }

    /// [`Model::init`] from a ChaCha8 stream seeded with `seed`.
    pub fn seeded(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Patch rows `[B·N × P]` and the batch size for images `[B×C×H×W]` or
    /// pre-tokenized input `[B×N×P]`.
    pub fn tokens(&self, x: &Tensor<T>) -> Result<(Tensor<T>, usize)> {
        let cfg = &self.config;
        let t = match x.ndim() {
            4 => {
                let (h, w) = cfg.image_size();
                if x.shape()[1] != cfg.in_channels || x.shape()[2] != h || x.shape()[3] != w {
                    return Err(SlabError::shape(
                        "model_forward",
                        format!("images {:?}, expected [B, {}, {h}, {w}]", x.shape(), cfg.in_channels),
                    ));
                }
                patchify(x, cfg.patch_size)?
            }
            3 => x.clone(),
            _ => {
                return Err(SlabError::shape("model_forward", format!("input {:?}", x.shape())));
            }
        };
        let (b, n, p) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        if b == 0 || n != cfg.tokens() || p != cfg.patch_dim() {
            return Err(SlabError::shape(
                "model_forward",
                format!("tokens {:?}, expected [B, {}, {}]", t.shape(), cfg.tokens(), cfg.patch_dim()),
            ));
        }
        Ok((t.reshape(&[b * n, p])?, b))
    }

    /// Eval-mode token features after the final norm, `[B·N × C]`.
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (t, batch) = self.tokens(x)?;
        let mut h = ops::linear(&t, &self.patch_w, Some(&self.patch_b))?;
        for b in &self.blocks {
            h = block_eval(&h, b, batch, self.config.grid, self.config.attn_kind)?;
        }
        match self.norm {
            Norm::Identity => Ok(h),
            _ => self.norm.eval(&h),
        }
    }

    /// Eval-mode logits `[B × classes]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let f = self.features(x)?;
        self.classify(&f)
    }

    fn classify(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.config.tokens();
        let c = self.config.dim;
        let batch = f.rows() / n;
        let inv = T::one() / T::c(n as f64);
        let mut pooled = vec![T::zero(); batch * c];
        for (b, sample) in f.data().chunks(n * c).enumerate() {
            let dst = &mut pooled[b * c..(b + 1) * c];
            for row in sample.chunks(c) {
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d += v;
                }
            }
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        ops::linear(&Tensor::new(vec![batch, c], pooled)?, &self.head_w, Some(&self.head_b))
    }

    /// Plain forward pass in `mode`; train mode updates BN running statistics.
    pub fn forward_mode(&mut self, x: &Tensor<T>, mode: Mode, rng: Option<&mut dyn RngCore>) -> Result<Tensor<T>> {
        let (t, batch) = self.tokens(x)?;
        let mut pass = Pass {
            mode,
            batch,
            grid: self.config.grid,
            attn_kind: self.config.attn_kind,
            droppath_rate: self.config.droppath_rate,
            rng,
        };
        let mut h = ops::linear(&t, &self.patch_w, Some(&self.patch_b))?;
        for b in &mut self.blocks {
            h = block_forward(&h, b, &mut pass)?;
        }
        let f = self.norm.forward(&h, mode)?;
        self.classify(&f)
    }

    /// Records a train-mode forward pass. Droppath is applied when `rng` is
    /// given and the configured rate is positive.
    pub fn forward_tape(&self, tape: &mut Tape<T>, x: &Tensor<T>, mut rng: Option<&mut dyn RngCore>) -> Result<TapeForward<T>> {
        let (t, batch) = self.tokens(x)?;
        let cfg = &self.config;
        let n = cfg.tokens();
        let rate = cfg.droppath_rate;
        let mut bd = Binder {
            tape,
            params: Vec::new(),
        };
        let mut stats = Vec::new();
        let input = bd.tape.constant(t);
        let pw = bd.bind("patch.w".into(), &self.patch_w);
        let pb = bd.bind("patch.b".into(), &self.patch_b);
        let mut h = bd.tape.linear(input, pw, Some(pb))?;

        let mut drop = |tape: &mut Tape<T>, y: Var| -> Result<Var> {
            match rng.as_mut() {
                Some(r) if rate > 0.0 => {
                    let keep = droppath_mask(batch, rate, &mut **r);
                    let c = tape.shape(y)[1];
                    let mask = Tensor::from_fn(&[batch * n, c], |i| T::c(keep[i / (n * c)]));
                    let m = tape.constant(mask);
                    tape.mul(y, m)
                }
                _ => Ok(y),
            }
        };

        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            let (z, st) = bd.norm(&format!("{p}.norm1"), &b.norm1, h)?;
            stats.push(st);
            let vars = AttentionVars {
                w_q: bd.bind(format!("{p}.attn.w_q"), &b.attn.w_q),
                w_k: bd.bind(format!("{p}.attn.w_k"), &b.attn.w_k),
                w_v: bd.bind(format!("{p}.attn.w_v"), &b.attn.w_v),
                w_o: bd.bind(format!("{p}.attn.w_o"), &b.attn.w_o),
                dwc_kernel: bd.bind(format!("{p}.attn.dwc"), &b.attn.dwc_kernel),
                qkv_bias: b.attn.qkv_bias.as_ref().map(|bs| {
                    [
                        bd.bind(format!("{p}.attn.b_q"), &bs[0]),
                        bd.bind(format!("{p}.attn.b_k"), &bs[1]),
                        bd.bind(format!("{p}.attn.b_v"), &bs[2]),
                    ]
                }),
                heads: b.attn.heads,
            };
            let a = match cfg.attn_kind {
                AttnKind::Softmax => attention::softmax_attention_tape(bd.tape, z, &vars, batch)?,
                AttnKind::Sla => attention::sla_attention_tape(bd.tape, z, &vars, batch, cfg.grid, b.attn.eps_denom)?,
            };
            let a = drop(bd.tape, a)?;
            h = bd.tape.add(h, a)?;

            let (z, st) = bd.norm(&format!("{p}.norm2"), &b.norm2, h)?;
            stats.push(st);
            let w1 = bd.bind(format!("{p}.mlp.fc1.w"), &b.mlp.fc1_w);
            let b1 = bd.bind(format!("{p}.mlp.fc1.b"), &b.mlp.fc1_b);
            let w2 = bd.bind(format!("{p}.mlp.fc2.w"), &b.mlp.fc2_w);
            let b2 = bd.bind(format!("{p}.mlp.fc2.b"), &b.mlp.fc2_b);
            let m = bd.tape.linear(z, w1, Some(b1))?;
            let m = bd.tape.gelu(m);
            let m = bd.tape.linear(m, w2, Some(b2))?;
            let m = drop(bd.tape, m)?;
            h = bd.tape.add(h, m)?;
        }
        let (z, st) = bd.norm("norm", &self.norm, h)?;
        stats.push(st);
        let pooled = bd.tape.mean_pool(z, batch)?;
        let hw = bd.bind("head.w".into(), &self.head_w);
        let hb = bd.bind("head.b".into(), &self.head_b);
        let logits = bd.tape.linear(pooled, hw, Some(hb))?;
        Ok(TapeForward {
            logits,
            params: bd.params,
            stats,
        })
    }

    /// Every norm in block order followed by the final norm.
    pub fn norms_mut(&mut self) -> Vec<&mut Norm<T>> {
        let mut out = Vec::with_capacity(2 * self.blocks.len() + 1);
        for b in &mut self.blocks {
            out.push(&mut b.norm1);
            out.push(&mut b.norm2);
        }
        out.push(&mut self.norm);
        out
    }

    pub fn norms(&self) -> Vec<&Norm<T>> {
        let mut out = Vec::with_capacity(2 * self.blocks.len() + 1);
        for b in &self.blocks {
            out.push(&b.norm1);
            out.push(&b.norm2);
        }
        out.push(&self.norm);
        out
    }

    /// Folds batch statistics from [`Model::forward_tape`] into the running
    /// statistics.
    pub fn apply_batch_stats(&mut self, stats: &[Option<BatchStats<T>>]) {
        for (n, st) in self.norms_mut().into_iter().zip(stats) {
            if let (Some(bn), Some(st)) = (n.bn_mut(), st) {
                bn.update_running(&st.mean, &st.var);
            }
        }
    }

    /// Records one optimizer step on every progressive norm.
    pub fn advance_schedules(&mut self) {
        for n in self.norms_mut() {
            if let Norm::Progressive(s) = n {
                s.advance();
            }
        }
    }

    /// Sets the decay length of every progressive norm.
    pub fn set_decay_steps(&mut self, total: u64) {
        self.config.decay_steps = total;
        for n in self.norms_mut() {
            if let Norm::Progressive(s) = n {
                s.total_steps = total;
            }
        }
    }

    /// Largest LN weight over all progressive norms; 0 when there are none.
    pub fn gamma(&self) -> f64 {
        self.norms().iter().filter_map(|n| n.gamma()).fold(0.0, f64::max)
    }

    /// Current step of the first progressive norm.
    pub fn schedule_step(&self) -> Option<u64> {
        self.norms().iter().find_map(|n| match n {
            Norm::Progressive(s) => Some(s.current_step),
            _ => None,
        })
    }

    pub fn named_tensors(&self) -> Vec<Named<&Tensor<T>>> {
        let mut out = Vec::new();
        out.push(Named { name: "patch.w".into(), tensor: &self.patch_w, learnable: true });
        out.push(Named { name: "patch.b".into(), tensor: &self.patch_b, learnable: true });
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            norm_tensors!(out, format!("{p}.norm1"), &b.norm1,);
            let a = &b.attn;
            for (n, t) in [("w_q", &a.w_q), ("w_k", &a.w_k), ("w_v", &a.w_v), ("w_o", &a.w_o), ("dwc", &a.dwc_kernel)] {
                out.push(Named { name: format!("{p}.attn.{n}"), tensor: t, learnable: true });
            }
            if let Some(bs) = &a.qkv_bias {
                for (n, t) in ["b_q", "b_k", "b_v"].iter().zip(bs) {
                    out.push(Named { name: format!("{p}.attn.{n}"), tensor: t, learnable: true });
                }
            }
            norm_tensors!(out, format!("{p}.norm2"), &b.norm2,);
            let m = &b.mlp;
            for (n, t) in [("fc1.w", &m.fc1_w), ("fc1.b", &m.fc1_b), ("fc2.w", &m.fc2_w), ("fc2.b", &m.fc2_b)] {
                out.push(Named { name: format!("{p}.mlp.{n}"), tensor: t, learnable: true });
            }
        }
        norm_tensors!(out, "norm".to_string(), &self.norm,);
        out.push(Named { name: "head.w".into(), tensor: &self.head_w, learnable: true });
        out.push(Named { name: "head.b".into(), tensor: &self.head_b, learnable: true });
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<Named<&mut Tensor<T>>> {
        let mut out = Vec::new();
        out.push(Named { name: "patch.w".into(), tensor: &mut self.patch_w, learnable: true });
        out.push(Named { name: "patch.b".into(), tensor: &mut self.patch_b, learnable: true });
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}");
            norm_tensors!(out, format!("{p}.norm1"), &mut b.norm1, mut);
            let a = &mut b.attn;
            for (n, t) in [("w_q", &mut a.w_q), ("w_k", &mut a.w_k), ("w_v", &mut a.w_v), ("w_o", &mut a.w_o), ("dwc", &mut a.dwc_kernel)] {
                out.push(Named { name: format!("{p}.attn.{n}"), tensor: t, learnable: true });
            }
            if let Some(bs) = &mut a.qkv_bias {
                for (n, t) in ["b_q", "b_k", "b_v"].iter().zip(bs.iter_mut()) {
                    out.push(Named { name: format!("{p}.attn.{n}"), tensor: t, learnable: true });
                }
            }
            norm_tensors!(out, format!("{p}.norm2"), &mut b.norm2, mut);
            let m = &mut b.mlp;
            for (n, t) in [("fc1.w", &mut m.fc1_w), ("fc1.b", &mut m.fc1_b), ("fc2.w", &mut m.fc2_w), ("fc2.b", &mut m.fc2_b)] {
                out.push(Named { name: format!("{p}.mlp.{n}"), tensor: t, learnable: true });
            }
        }
        norm_tensors!(out, "norm".to_string(), &mut self.norm, mut);
        out.push(Named { name: "head.w".into(), tensor: &mut self.head_w, learnable: true });
        out.push(Named { name: "head.b".into(), tensor: &mut self.head_b, learnable: true });
        out
    }

    /// Total stored scalars, running statistics included.
    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|n| n.tensor.numel()).sum()
    }

    pub fn learnable_count(&self) -> usize {
        self.named_tensors().iter().filter(|n| n.learnable).map(|n| n.tensor.numel()).sum()
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        let mut out = Model::<U>::init(&self.config, &mut ChaCha8Rng::seed_from_u64(0)).expect("valid config");
        let src = self.named_tensors();
        for (dst, s) in out.named_tensors_mut().into_iter().zip(src) {
            *dst.tensor = s.tensor.cast();
        }
        let steps: Vec<_> = self.norms().iter().map(|n| schedule_of(n)).collect();
        for (n, st) in out.norms_mut().into_iter().zip(steps) {
            if let (Norm::Progressive(s), Some(st)) = (n, st) {
                s.current_step = st.current_step;
                s.total_steps = st.total_steps;
                s.schedule = st.schedule;
            }
        }
        out
    }
}

impl<T: Float> StatisticsRecalibration for Model<T> {
    type Batch = Tensor<T>;

    fn norm_gamma(&self) -> f64 {
        self.gamma()
    }

    fn update_statistics(&mut self, batch: &Tensor<T>) -> Result<()> {
        self.forward_mode(batch, Mode::Train, None).map(|_| ())
    }
}

// ---- FLOPs -----------------------------------------------------------

/// Multiply-accumulate counts of one inference pass over a single sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockFlops {
    pub norms: u64,
    pub qkv: u64,
    pub attention: u64,
    pub out_proj: u64,
    pub mlp: u64,
    pub total: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsTable {
    pub tokens: u64,
    pub patch_embed: u64,
    pub per_block: BlockFlops,
    pub blocks: u64,
    pub head: u64,
    pub total: u64,
}

/// In-bounds taps of a same-padded `k×k` convolution over an `h×w` grid.
fn dwc_taps(h: usize, w: usize, k: usize) -> u64 {
    let r = (k / 2) as i64;
    let span = |n: usize| -> u64 { (-r..=r).map(|d| (n as i64 - d.abs()).max(0) as u64).sum() };
    span(h) * span(w)
}

/// Token-mixing MACs for one sample, projections excluded.
///
/// Softmax: `QKᵀ` and `A·V`, `2·N²·C`. SLA: `ReLU(K)ᵀV` and `ReLU(Q)·(KᵀV)`
/// (`2·N·C²/h`), the normalizer `ReLU(Q)·ΣReLU(K)` (`N·C`), and the
/// depthwise branch counted over in-bounds taps (`≈ N·C·k²`).
pub fn attention_macs(kind: AttnKind, grid: TokenGrid, dim: usize, heads: usize, kernel: usize) -> u64 {
    let n = grid.tokens() as u64;
    let c = dim as u64;
    match kind {
        AttnKind::Softmax => 2 * n * n * c,
        AttnKind::Sla => {
            let d = c / heads as u64;
            heads as u64 * (2 * n * d * d + n * d) + c * dwc_taps(grid.height, grid.width, kernel)
        }
    }
}

/// Per-element multiplies of one eval-mode normalization.
fn norm_macs(cfg: &ModelConfig) -> u64 {
    if cfg.fused {
        return 0;
    }
    match cfg.norm_kind {
        // squares for the variance, normalize, scale
        NormKind::LayerNorm => 3,
        NormKind::BatchNorm => 1,
        // BN affine plus η⊙x at γ = 0
        NormKind::PRepBN => 2,
    }
}

pub fn count_flops(cfg: &ModelConfig) -> FlopsTable {
    let n = cfg.tokens() as u64;
    let c = cfg.dim as u64;
    let hidden = cfg.hidden() as u64;
    let heads = cfg.heads.max(1);
    let nm = norm_macs(cfg) * n * c;
    let attention = if cfg.dim == 0 {
        0
    } else {
        attention_macs(cfg.attn_kind, cfg.grid, cfg.dim, heads, cfg.dwc_kernel)
    };
    let mut b = BlockFlops {
        norms: 2 * nm,
        qkv: 3 * n * c * c,
        attention,
        out_proj: n * c * c,
        mlp: 2 * n * c * hidden,
        total: 0,
    };
    b.total = b.norms + b.qkv + b.attention + b.out_proj + b.mlp;
    let patch_embed = n * cfg.patch_dim() as u64 * c;
    let head = nm + c * cfg.num_classes as u64;
    let blocks = cfg.depth as u64 * b.total;
    FlopsTable {
        tokens: n,
        patch_embed,
        per_block: b,
        blocks,
        head,
        total: patch_embed + blocks + head,
    }
}

// ---- fusion ----------------------------------------------------------

fn bias_or_zero<T: Float>(b: Option<&Tensor<T>>, d: usize) -> Tensor<T> {
    b.cloned().unwrap_or_else(|| Tensor::zeros(&[d]))
}

/// Folds every normalization into its consumer: norm1 into the QKV
/// projections, norm2 into the first MLP layer, the final norm into the
/// head (through the mean pool). Progressive norms are first rewritten as
/// plain BatchNorms. Already fused models are returned unchanged.
pub fn fuse_model<T: Float>(model: &Model<T>) -> Result<Model<T>> {
    if model.config.fused {
        return Ok(model.clone());
    }
    if model.config.norm_kind == NormKind::LayerNorm {
        return Err(SlabError::Unfusable("LayerNorm uses per-token statistics".into()));
    }
    let g = model.gamma();
    if g > 0.0 {
        return Err(SlabError::NotConverged { gamma: g });
    }
    let as_bn = |n: &Norm<T>| {
        n.as_batchnorm()
            .ok_or_else(|| SlabError::Unfusable("normalization has no BatchNorm form".into()))
    };
    let mut out = model.clone();
    let c = model.config.dim;
    for b in &mut out.blocks {
        let bn1 = as_bn(&b.norm1)?;
        let biases = b.attn.qkv_bias.clone();
        let bias = |i: usize| bias_or_zero(biases.as_ref().map(|bs| &bs[i]), c);
        let (wq, bq) = norm::fuse_bn_into_linear(&bn1, &b.attn.w_q, &bias(0))?;
        let (wk, bk) = norm::fuse_bn_into_linear(&bn1, &b.attn.w_k, &bias(1))?;
        let (wv, bv) = norm::fuse_bn_into_linear(&bn1, &b.attn.w_v, &bias(2))?;
        b.attn.w_q = wq;
        b.attn.w_k = wk;
        b.attn.w_v = wv;
        b.attn.qkv_bias = Some([bq, bk, bv]);

        let bn2 = as_bn(&b.norm2)?;
        let (w1, b1) = norm::fuse_bn_into_linear(&bn2, &b.mlp.fc1_w, &b.mlp.fc1_b)?;
        b.mlp.fc1_w = w1;
        b.mlp.fc1_b = b1;
        b.norm1 = Norm::Identity;
        b.norm2 = Norm::Identity;
    }
    let bn = as_bn(&out.norm)?;
    let (hw, hb) = norm::fuse_bn_into_linear(&bn, &out.head_w, &out.head_b)?;
    out.head_w = hw;
    out.head_b = hb;
    out.norm = Norm::Identity;
    out.config.norm_kind = NormKind::BatchNorm;
    out.config.fused = true;
    Ok(out)
}

// ---- checkpoints -----------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"SLABCKPT1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub norm: String,
    pub current_step: u64,
    pub total_steps: u64,
    pub schedule: DecaySchedule,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub precision: DType,
    pub config: ModelConfig,
    pub schedules: Vec<ScheduleState>,
    pub tensors: Vec<TensorEntry>,
}

fn norm_names(depth: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(2 * depth + 1);
    for i in 0..depth {
        out.push(format!("blocks.{i}.norm1"));
        out.push(format!("blocks.{i}.norm2"));
    }
    out.push("norm".into());
    out
}

fn schedule_of<T: Float>(n: &Norm<T>) -> Option<ScheduleState> {
    match n {
        Norm::Progressive(s) => Some(ScheduleState {
            norm: String::new(),
            current_step: s.current_step,
            total_steps: s.total_steps,
            schedule: s.schedule,
        }),
        _ => None,
    }
}

/// Serializes the model: magic, little-endian `u64` header length, JSON
/// header, then every tensor's little-endian bytes in header order.
pub fn checkpoint_bytes<T: Float>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for nt in model.named_tensors() {
        let offset = payload.len() as u64;
        for &v in nt.tensor.data() {
            v.write_le(&mut payload);
        }
        tensors.push(TensorEntry {
            name: nt.name,
            shape: nt.tensor.shape().to_vec(),
            offset,
            nbytes: payload.len() as u64 - offset,
        });
    }
    let schedules = model
        .norms()
        .iter()
        .zip(norm_names(model.blocks.len()))
        .filter_map(|(n, name)| schedule_of(n).map(|s| ScheduleState { norm: name, ..s }))
        .collect();
    let header = CheckpointHeader {
        precision: T::DTYPE,
        config: model.config.clone(),
        schedules,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| SlabError::CorruptCheckpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint<T: Float>(model: &Model<T>, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(model)?;
    std::fs::write(path, bytes).map_err(|e| SlabError::io(path, e))
}

/// Reads only the header of a checkpoint.
pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    let corrupt = |m: &str| SlabError::CorruptCheckpoint(m.to_string());
    if bytes.len() < CHECKPOINT_MAGIC.len() + 8 || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let rest = &bytes[CHECKPOINT_MAGIC.len()..];
    let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if len > rest.len() {
        return Err(corrupt("header longer than file"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&rest[..len]).map_err(|e| SlabError::CorruptCheckpoint(format!("header: {e}")))?;
    Ok((header, &rest[len..]))
}

/// Rebuilds a model from checkpoint bytes. Tensors stored at another
/// precision are converted.
pub fn checkpoint_from_bytes<T: Float>(bytes: &[u8]) -> Result<Model<T>> {
    let (header, payload) = read_header(bytes)?;
    let corrupt = |m: String| SlabError::CorruptCheckpoint(m);
    header
        .config
        .validate()
        .map_err(|e| corrupt(format!("config: {e}")))?;
    let mut model = Model::<T>::init(&header.config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let width = header.precision.size_of();
    let mut expected_len = 0u64;
    {
        let slots = model.named_tensors_mut();
        if slots.len() != header.tensors.len() {
            return Err(corrupt(format!(
                "header lists {} tensors, model has {}",
                header.tensors.len(),
                slots.len()
            )));
        }
        for (slot, entry) in slots.into_iter().zip(&header.tensors) {
            if slot.name != entry.name || slot.tensor.shape() != entry.shape.as_slice() {
                return Err(corrupt(format!("unexpected tensor {} {:?}", entry.name, entry.shape)));
            }
            let numel: usize = entry.shape.iter().product();
            if entry.nbytes != (numel * width) as u64 || entry.offset != expected_len {
                return Err(corrupt(format!("byte span of {} disagrees with its shape", entry.name)));
            }
            let end = (entry.offset + entry.nbytes) as usize;
            if end > payload.len() {
                return Err(corrupt(format!("payload truncated inside {}", entry.name)));
            }
            let blob = &payload[entry.offset as usize..end];
            let data = slot.tensor.data_mut();
            for (d, chunk) in data.iter_mut().zip(blob.chunks_exact(width)) {
                *d = match header.precision {
                    DType::F32 => T::c(f32::read_le(chunk) as f64),
                    DType::F64 => T::c(f64::read_le(chunk)),
                };
            }
            expected_len = end as u64;
        }
    }
    if expected_len != payload.len() as u64 {
        return Err(corrupt(format!(
            "payload holds {} bytes, tensors cover {expected_len}",
            payload.len()
        )));
    }
    let names = norm_names(model.blocks.len());
    let mut seen = 0;
    for (n, name) in model.norms_mut().into_iter().zip(names) {
        if let Norm::Progressive(s) = n {
            let st = header
                .schedules
                .iter()
                .find(|st| st.norm == name)
                .ok_or_else(|| corrupt(format!("missing schedule state for {name}")))?;
            s.current_step = st.current_step;
            s.total_steps = st.total_steps;
            s.schedule = st.schedule;
            seen += 1;
        }
    }
    if seen != header.schedules.len() {
        return Err(corrupt("schedule states for non-progressive norms".into()));
    }
    Ok(model)
}

pub fn load_checkpoint<T: Float>(path: &Path) -> Result<Model<T>> {
    let bytes = std::fs::read(path).map_err(|e| SlabError::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
