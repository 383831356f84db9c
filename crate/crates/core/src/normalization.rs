//! LayerNorm, BatchNorm, RepBN and the progressive LN → RepBN blend, plus the
//! inference-time rewrites that remove normalization entirely:
//!
//! * RepBN `BN(x) + η·x` equals a BatchNorm with `α' = α + η·σ` and
//!   `β' = β + η·μ` (`σ = sqrt(running_var + eps)`).
//! * An eval-mode BatchNorm is the per-channel affine `a⊙x + b` and folds into
//!   the weights and bias of the linear layer that consumes it.
//!
//! Feature data is laid out row-major with channels on the last axis; batch
//! statistics are taken over every other axis (tokens and samples jointly).

use serde::{Deserialize, Serialize};

use crate::error::{Result, SlabError};
use crate::tensor::kernels;
use crate::tensor::ops::column_moments;
use crate::tensor::{Float, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LNParams<T> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub eps: f64,
}

impl<T: Float> LNParams<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Tensor::ones(&[channels]),
            shift: Tensor::zeros(&[channels]),
            eps: DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.numel()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BNParams<T> {
    pub alpha: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Float> BNParams<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            alpha: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.alpha.numel()
    }

    /// `sqrt(running_var + eps)` per channel.
    pub fn sigma(&self) -> Vec<T> {
        let eps = T::c(self.eps);
        self.running_var.data().iter().map(|&v| (v + eps).sqrt()).collect()
    }

    /// Exponential moving average update with population batch statistics.
    pub fn update_running(&mut self, batch_mean: &[T], batch_var: &[T]) {
        let m = T::c(self.momentum);
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(batch_mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(batch_var) {
            *r = keep * *r + m * b;
        }
    }

    /// The eval-mode transform as a per-channel affine.
    pub fn to_affine(&self) -> FusedAffine<T> {
        let sigma = self.sigma();
        let a: Vec<T> = self
            .alpha
            .data()
            .iter()
            .zip(&sigma)
            .map(|(&al, &s)| al / s)
            .collect();
        let b: Vec<T> = self
            .beta
            .data()
            .iter()
            .zip(&a)
            .zip(self.running_mean.data())
            .map(|((&be, &ai), &mu)| be - ai * mu)
            .collect();
        FusedAffine {
            a: Tensor::vector(a),
            b: Tensor::vector(b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepBNParams<T> {
    pub bn: BNParams<T>,
    /// Per-channel residual weight η, zero at initialization.
    pub eta: Tensor<T>,
}

impl<T: Float> RepBNParams<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            bn: BNParams::new(channels),
            eta: Tensor::zeros(&[channels]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecaySchedule {
    #[default]
    Linear,
    Cosine,
    Step,
}

/// Blend weight of the LN branch after `current` of `total` steps.
///
/// All schedules start at 1, reach 0 at `total`, stay there, and never
/// increase. `total == 0` means the LN phase is already over.
pub fn schedule_gamma(kind: DecaySchedule, current: u64, total: u64) -> f64 {
    if total == 0 || current >= total {
        return 0.0;
    }
    match kind {
        DecaySchedule::Linear => ((total - current) as f64 / total as f64).clamp(0.0, 1.0),
        DecaySchedule::Cosine => {
            let g = 0.5 * (1.0 + (std::f64::consts::PI * current as f64 / total as f64).cos());
            g.clamp(0.0, 1.0)
        }
        DecaySchedule::Step => {
            if current * 2 < total {
                1.0
            } else {
                0.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PRepBNState<T> {
    pub ln: LNParams<T>,
    pub repbn: RepBNParams<T>,
    pub total_steps: u64,
    pub current_step: u64,
    pub schedule: DecaySchedule,
}

impl<T: Float> PRepBNState<T> {
    pub fn new(channels: usize, total_steps: u64, schedule: DecaySchedule) -> Self {
        Self {
            ln: LNParams::new(channels),
            repbn: RepBNParams::new(channels),
            total_steps,
            current_step: 0,
            schedule,
        }
    }

    /// Records one optimizer step.
    pub fn advance(&mut self) {
        self.current_step += 1;
    }
}

/// Current LN weight γ of a progressive norm.
pub fn gamma<T: Float>(state: &PRepBNState<T>) -> f64 {
    schedule_gamma(state.schedule, state.current_step, state.total_steps)
}

/// Per-channel affine `y = a⊙x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedAffine<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Float> FusedAffine<T> {
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_channels(x, self.a.numel(), "FusedAffine::apply")?;
        let c = self.a.numel();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(c) {
            for ((v, &a), &b) in row.iter_mut().zip(self.a.data()).zip(self.b.data()) {
                *v = a * *v + b;
            }
        }
        Ok(out)
    }
}

fn check_channels<T: Float>(x: &Tensor<T>, c: usize, op: &'static str) -> Result<()> {
    if x.ndim() == 0 || x.last_dim() != c {
        return Err(SlabError::shape(
            op,
            format!("input {:?} against {c} channels", x.shape()),
        ));
    }
    Ok(())
}

/// Per-token normalization over the last axis followed by scale and shift.
pub fn layernorm<T: Float>(x: &Tensor<T>, p: &LNParams<T>) -> Result<Tensor<T>> {
    let c = p.channels();
    check_channels(x, c, "layernorm")?;
    let eps = T::c(p.eps);
    let inv_c = T::one() / T::c(c as f64);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let mean = row.iter().copied().sum::<T>() * inv_c;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let inv = T::one() / (var + eps).sqrt();
        for ((v, &s), &b) in row.iter_mut().zip(p.scale.data()).zip(p.shift.data()) {
            *v = (*v - mean) * inv * s + b;
        }
    }
    Ok(out)
}

fn bn_with_stats<T: Float>(x: &Tensor<T>, p: &BNParams<T>, mean: &[T], var: &[T]) -> Tensor<T> {
    let eps = T::c(p.eps);
    let c = p.channels();
    let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        for j in 0..c {
            row[j] = (row[j] - mean[j]) * inv[j] * p.alpha.data()[j] + p.beta.data()[j];
        }
    }
    out
}

/// Eval-mode batch norm using running statistics only.
pub fn batchnorm_eval<T: Float>(x: &Tensor<T>, p: &BNParams<T>) -> Result<Tensor<T>> {
    check_channels(x, p.channels(), "batchnorm")?;
    Ok(bn_with_stats(x, p, p.running_mean.data(), p.running_var.data()))
}

/// Train-mode batch norm: normalizes with batch statistics and folds them
/// into the running statistics.
pub fn batchnorm_train<T: Float>(x: &Tensor<T>, p: &mut BNParams<T>) -> Result<Tensor<T>> {
    check_channels(x, p.channels(), "batchnorm")?;
    if x.rows() < 2 {
        return Err(SlabError::BatchTooSmall(x.rows()));
    }
    let (mean, var) = column_moments(x.data(), p.channels());
    let out = bn_with_stats(x, p, &mean, &var);
    p.update_running(&mean, &var);
    Ok(out)
}

pub fn batchnorm<T: Float>(x: &Tensor<T>, p: &mut BNParams<T>, mode: Mode) -> Result<Tensor<T>> {
    match mode {
        Mode::Train => batchnorm_train(x, p),
        Mode::Eval => batchnorm_eval(x, p),
    }
}

/// `BN(x) + η⊙x`
pub fn repbn<T: Float>(x: &Tensor<T>, p: &mut RepBNParams<T>, mode: Mode) -> Result<Tensor<T>> {
    let mut y = batchnorm(x, &mut p.bn, mode)?;
    add_eta(&mut y, x, &p.eta);
    Ok(y)
}

pub fn repbn_eval<T: Float>(x: &Tensor<T>, p: &RepBNParams<T>) -> Result<Tensor<T>> {
    let mut y = batchnorm_eval(x, &p.bn)?;
    add_eta(&mut y, x, &p.eta);
    Ok(y)
}

fn add_eta<T: Float>(y: &mut Tensor<T>, x: &Tensor<T>, eta: &Tensor<T>) {
    let c = eta.numel();
    for (yr, xr) in y.data_mut().chunks_mut(c).zip(x.data().chunks(c)) {
        for ((yv, &xv), &e) in yr.iter_mut().zip(xr).zip(eta.data()) {
            *yv += e * xv;
        }
    }
}

/// Rewrites RepBN as a plain BatchNorm with identical eval-mode output.
pub fn reparam_repbn_to_bn<T: Float>(p: &RepBNParams<T>) -> BNParams<T> {
    let sigma = p.bn.sigma();
    let eta = p.eta.data();
    let alpha: Vec<T> = p
        .bn
        .alpha
        .data()
        .iter()
        .zip(eta)
        .zip(&sigma)
        .map(|((&a, &e), &s)| a + e * s)
        .collect();
    let beta: Vec<T> = p
        .bn
        .beta
        .data()
        .iter()
        .zip(eta)
        .zip(p.bn.running_mean.data())
        .map(|((&b, &e), &m)| b + e * m)
        .collect();
    BNParams {
        alpha: Tensor::vector(alpha),
        beta: Tensor::vector(beta),
        ..p.bn.clone()
    }
}

fn blend<T: Float>(g: f64, ln: Tensor<T>, rep: Tensor<T>) -> Tensor<T> {
    let (gl, gr) = (T::c(g), T::c(1.0 - g));
    let mut out = ln;
    for (o, &r) in out.data_mut().iter_mut().zip(rep.data()) {
        *o = gl * *o + gr * r;
    }
    out
}

/// `γ·LN(x) + (1−γ)·RepBN(x)`. The endpoints return one branch unchanged.
///
/// The schedule step is not advanced here; the training loop calls
/// [`PRepBNState::advance`] once per optimizer step so every forward within
/// a step sees the same γ.
pub fn prepbn<T: Float>(x: &Tensor<T>, state: &mut PRepBNState<T>, mode: Mode) -> Result<Tensor<T>> {
    let g = gamma(state);
    if g == 1.0 {
        // BN statistics still track the data while LN dominates.
        if mode == Mode::Train {
            repbn(x, &mut state.repbn, mode)?;
        }
        return layernorm(x, &state.ln);
    }
    let rep = repbn(x, &mut state.repbn, mode)?;
    if g == 0.0 {
        return Ok(rep);
    }
    Ok(blend(g, layernorm(x, &state.ln)?, rep))
}

pub fn prepbn_eval<T: Float>(x: &Tensor<T>, state: &PRepBNState<T>) -> Result<Tensor<T>> {
    let g = gamma(state);
    if g == 1.0 {
        return layernorm(x, &state.ln);
    }
    let rep = repbn_eval(x, &state.repbn)?;
    if g == 0.0 {
        return Ok(rep);
    }
    Ok(blend(g, layernorm(x, &state.ln)?, rep))
}

/// Folds an eval-mode BatchNorm into the linear layer `x·W + b` that consumes
/// its output. `W` is `[c×d]` (input rows), `b` is `[d]`.
pub fn fuse_bn_into_linear<T: Float>(p: &BNParams<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let c = p.channels();
    if w.ndim() != 2 || w.shape()[0] != c || b.numel() != w.shape()[1] {
        return Err(SlabError::shape(
            "fuse_bn_into_linear",
            format!("W {:?}, b {:?} against {c} channels", w.shape(), b.shape()),
        ));
    }
    let d = w.shape()[1];
    let affine = p.to_affine();
    let mut w_fused = w.clone();
    for (row, &a) in w_fused.data_mut().chunks_mut(d).zip(affine.a.data()) {
        row.iter_mut().for_each(|v| *v *= a);
    }
    let mut b_fused = b.clone();
    let shift = affine.b.data();
    for (i, wr) in w.data().chunks(d).enumerate() {
        kernels::axpy(shift[i], wr, b_fused.data_mut());
    }
    Ok((w_fused, b_fused))
}

/// A model whose BatchNorm running statistics can be refreshed by forward
/// passes while every learnable tensor stays frozen.
pub trait StatisticsRecalibration {
    type Batch;

    /// LN weight of the progressive norms; recalibration requires 0.
    fn norm_gamma(&self) -> f64;

    /// One forward pass that only updates running statistics.
    fn update_statistics(&mut self, batch: &Self::Batch) -> Result<()>;
}

/// Runs `passes` sweeps over `batches` updating only running statistics.
pub fn recalibrate_stats<M: StatisticsRecalibration>(model: &mut M, batches: &[M::Batch], passes: usize) -> Result<()> {
    if passes == 0 {
        return Ok(());
    }
    if batches.is_empty() {
        return Err(SlabError::EmptyStream);
    }
    let g = model.norm_gamma();
    if g > 0.0 {
        return Err(SlabError::NotConverged { gamma: g });
    }
    for _ in 0..passes {
        for b in batches {
            model.update_statistics(b)?;
        }
    }
    Ok(())
}

impl<T: Float> StatisticsRecalibration for BNParams<T> {
    type Batch = Tensor<T>;

    fn norm_gamma(&self) -> f64 {
        0.0
    }

    fn update_statistics(&mut self, batch: &Tensor<T>) -> Result<()> {
        check_channels(batch, self.channels(), "recalibrate")?;
        if batch.rows() < 2 {
            return Err(SlabError::BatchTooSmall(batch.rows()));
        }
        let (mean, var) = column_moments(batch.data(), self.channels());
        self.update_running(&mean, &var);
        Ok(())
    }
}

impl<T: Float> StatisticsRecalibration for PRepBNState<T> {
    type Batch = Tensor<T>;

    fn norm_gamma(&self) -> f64 {
        gamma(self)
    }

    fn update_statistics(&mut self, batch: &Tensor<T>) -> Result<()> {
        self.repbn.bn.update_statistics(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    fn hand_repbn() -> RepBNParams<f64> {
        let mut p = RepBNParams::new(1);
        p.bn.running_mean = t(&[1], &[1.0]);
        p.bn.running_var = t(&[1], &[4.0]);
        p.bn.eps = 0.0;
        p.bn.alpha = t(&[1], &[3.0]);
        p.bn.beta = t(&[1], &[0.5]);
        p.eta = t(&[1], &[0.25]);
        p
    }

    #[test]
    fn layernorm_cases() {
        let mut p = LNParams::<f64>::new(2);
        let y = layernorm(&t(&[1, 2], &[5., 5.]), &p).unwrap();
        assert_eq!(y.data(), &[0., 0.]);
        p.eps = 0.0;
        let y = layernorm(&t(&[1, 2], &[1., 3.]), &p).unwrap();
        assert_eq!(y.data(), &[-1., 1.]);
        p.scale = Tensor::zeros(&[2]);
        p.shift = t(&[2], &[0.3, -0.7]);
        let y = layernorm(&t(&[2, 2], &[1., 3., -4., 9.]), &p).unwrap();
        assert_eq!(y.data(), &[0.3, -0.7, 0.3, -0.7]);
        assert!(layernorm(&t(&[1, 3], &[1., 2., 3.]), &p).is_err());
    }

    #[test]
    fn batchnorm_cases() {
        let mut p = BNParams::<f64>::new(2);
        p.eps = 0.0;
        let x = t(&[2, 2], &[0.3, -1.2, 4.0, 2.5]);
        assert_eq!(batchnorm(&x, &mut p.clone(), Mode::Eval).unwrap(), x);

        let mut p1 = BNParams::<f64>::new(1);
        p1.eps = 0.0;
        let y = batchnorm(&t(&[2, 1], &[1., 3.]), &mut p1, Mode::Train).unwrap();
        assert_eq!(y.data(), &[-1., 1.]);
        // EMA: 0.9*0 + 0.1*2, 0.9*1 + 0.1*1
        assert!((p1.running_mean.item() - 0.2).abs() < 1e-15);
        assert!((p1.running_var.item() - 1.0).abs() < 1e-15);

        assert!(matches!(
            batchnorm(&t(&[1, 1], &[1.]), &mut p1, Mode::Train),
            Err(SlabError::BatchTooSmall(1))
        ));
    }

    #[test]
    fn repbn_hand_values() {
        let p = hand_repbn();
        let y = repbn_eval(&t(&[1, 1], &[5.0]), &p).unwrap();
        assert_eq!(y.item(), 7.75);
        let bn = reparam_repbn_to_bn(&p);
        assert_eq!(bn.alpha.item(), 3.5);
        assert_eq!(bn.beta.item(), 0.75);
        assert_eq!(batchnorm_eval(&t(&[1, 1], &[5.0]), &bn).unwrap().item(), 7.75);
    }

    #[test]
    fn repbn_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[6, 3], 2.0, &mut rng);
        let mut p = RepBNParams::<f64>::new(3);
        p.bn.running_mean = Tensor::randn(&[3], 1.0, &mut rng);
        p.bn.alpha = Tensor::randn(&[3], 1.0, &mut rng);
        // η = 0 is plain BN
        assert!(repbn_eval(&x, &p).unwrap().bit_eq(&batchnorm_eval(&x, &p.bn).unwrap()));
        let bn = reparam_repbn_to_bn(&p);
        assert!(bn.alpha.bit_eq(&p.bn.alpha) && bn.beta.bit_eq(&p.bn.beta));
        // α = β = 0, η = 1 skips the norm
        p.bn.alpha = Tensor::zeros(&[3]);
        p.bn.beta = Tensor::zeros(&[3]);
        p.eta = Tensor::ones(&[3]);
        assert!(repbn_eval(&x, &p).unwrap().max_abs_diff(&x) == 0.0);
    }

    #[test]
    fn gamma_schedules() {
        for kind in [DecaySchedule::Linear, DecaySchedule::Cosine, DecaySchedule::Step] {
            assert_eq!(schedule_gamma(kind, 0, 10), 1.0);
            assert_eq!(schedule_gamma(kind, 10, 10), 0.0);
            assert_eq!(schedule_gamma(kind, 11, 10), 0.0);
            let mut prev = 1.0;
            for s in 0..=12 {
                let g = schedule_gamma(kind, s, 10);
                assert!(g <= prev && (0.0..=1.0).contains(&g));
                prev = g;
            }
        }
        assert_eq!(schedule_gamma(DecaySchedule::Linear, 75_000, 300_000), 0.75);
        assert!((schedule_gamma(DecaySchedule::Cosine, 5, 10) - 0.5).abs() < 1e-15);
        assert_eq!(schedule_gamma(DecaySchedule::Step, 4, 10), 1.0);
        assert_eq!(schedule_gamma(DecaySchedule::Step, 5, 10), 0.0);
    }

    #[test]
    fn prepbn_endpoints_and_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);
        let mut s = PRepBNState::<f64>::new(4, 10, DecaySchedule::Linear);
        s.repbn.bn.running_mean = Tensor::randn(&[4], 1.0, &mut rng);
        s.repbn.eta = Tensor::randn(&[4], 1.0, &mut rng);
        assert!(prepbn_eval(&x, &s).unwrap().bit_eq(&layernorm(&x, &s.ln).unwrap()));
        s.current_step = 10;
        assert!(prepbn_eval(&x, &s).unwrap().bit_eq(&repbn_eval(&x, &s.repbn).unwrap()));

        // γ = 0.5 on a single channel pair with identity affines.
        let mut s = PRepBNState::<f64>::new(2, 2, DecaySchedule::Linear);
        s.current_step = 1;
        s.ln.eps = 0.0;
        s.repbn.bn.eps = 0.0;
        let x = t(&[1, 2], &[1., 3.]);
        let ln = [-1.0, 1.0];
        let rep = [1.0, 3.0]; // μ = 0, σ² = 1, η = 0
        let y = prepbn_eval(&x, &s).unwrap();
        for j in 0..2 {
            assert_eq!(y.data()[j], 0.5 * (ln[j] + rep[j]));
        }
    }

    #[test]
    fn fuse_bn_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::<f64>::randn(&[3, 2], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[2], 1.0, &mut rng);
        let mut p = BNParams::<f64>::new(3);
        p.eps = 0.0;
        let (wf, bf) = fuse_bn_into_linear(&p, &w, &b).unwrap();
        assert_eq!((wf, bf), (w.clone(), b.clone()));

        p.alpha = Tensor::zeros(&[3]);
        p.beta = t(&[3], &[1., -2., 0.5]);
        let (wf, bf) = fuse_bn_into_linear(&p, &w, &b).unwrap();
        assert!(wf.data().iter().all(|&v| v == 0.0));
        for j in 0..2 {
            let want = b.data()[j] + (0..3).map(|i| p.beta.data()[i] * w.at(&[i, j])).sum::<f64>();
            assert!((bf.data()[j] - want).abs() < 1e-14);
        }
        assert!(fuse_bn_into_linear(&p, &Tensor::zeros(&[2, 2]), &b).is_err());
    }

    #[test]
    fn recalibration_converges_on_constant_stream() {
        let mut p = BNParams::<f64>::new(2);
        let batch = Tensor::full(&[8, 2], 3.0);
        recalibrate_stats(&mut p, std::slice::from_ref(&batch), 200).unwrap();
        for (&m, &v) in p.running_mean.data().iter().zip(p.running_var.data()) {
            assert!((m - 3.0).abs() < 1e-8);
            assert!(v.abs() < 1e-8);
        }
        let before = p.clone();
        recalibrate_stats(&mut p, &[], 0).unwrap();
        assert_eq!(p, before);
        assert!(matches!(
            recalibrate_stats(&mut p, &[], 1),
            Err(SlabError::EmptyStream)
        ));
    }

    #[test]
    fn recalibration_requires_transition() {
        let mut s = PRepBNState::<f64>::new(2, 4, DecaySchedule::Linear);
        let batch = Tensor::full(&[4, 2], 1.0);
        assert!(matches!(
            recalibrate_stats(&mut s, std::slice::from_ref(&batch), 1),
            Err(SlabError::NotConverged { .. })
        ));
        s.current_step = 4;
        let learnable = (s.ln.clone(), s.repbn.eta.clone(), s.repbn.bn.alpha.clone());
        recalibrate_stats(&mut s, std::slice::from_ref(&batch), 3).unwrap();
        assert!(learnable.0.scale.bit_eq(&s.ln.scale));
        assert!(learnable.1.bit_eq(&s.repbn.eta));
        assert!(learnable.2.bit_eq(&s.repbn.bn.alpha));
    }

    #[test]
    fn lemma_sweep_f32_and_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst64 = 0.0f64;
        let mut worst32 = 0.0f64;
        for _ in 0..1000 {
            let mut p = RepBNParams::<f64>::new(1);
            let mu = rng.gen_range(-1.0..1.0);
            let var = rng.gen_range(0.25..4.0);
            p.bn.running_mean = Tensor::vector(vec![mu]);
            p.bn.running_var = Tensor::vector(vec![var]);
            p.bn.alpha = Tensor::vector(vec![rng.gen_range(-2.0..2.0)]);
            p.bn.beta = Tensor::vector(vec![rng.gen_range(-1.0..1.0)]);
            p.eta = Tensor::vector(vec![rng.gen_range(-1.0..1.0)]);
            let x = Tensor::<f64>::randn(&[1, 1], (var + p.bn.eps).sqrt(), &mut rng).map(|z| z + mu);
            let bn = reparam_repbn_to_bn(&p);
            worst64 = worst64.max(repbn_eval(&x, &p).unwrap().max_abs_diff(&batchnorm_eval(&x, &bn).unwrap()));

            let p32 = RepBNParams {
                bn: BNParams {
                    alpha: p.bn.alpha.cast(),
                    beta: p.bn.beta.cast(),
                    running_mean: p.bn.running_mean.cast(),
                    running_var: p.bn.running_var.cast(),
                    ..BNParams::new(1)
                },
                eta: p.eta.cast::<f32>(),
            };
            let x32 = x.cast::<f32>();
            let bn32 = reparam_repbn_to_bn(&p32);
            worst32 = worst32.max(repbn_eval(&x32, &p32).unwrap().max_abs_diff(&batchnorm_eval(&x32, &bn32).unwrap()));
        }
        println!("lemma worst f64 {worst64:e} f32 {worst32:e}");
        assert!(worst64 <= 1e-12, "{worst64}");
        assert!(worst32 <= 1e-6, "{worst32}");
    }
}
