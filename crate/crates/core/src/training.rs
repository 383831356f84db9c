//! Toy-scale training: AdamW, warmup + cosine learning rate, droppath,
//! label-smoothed cross-entropy, the LN → RepBN schedule advanced once per
//! optimizer step, and a final pass that refreshes BatchNorm statistics with
//! every learnable tensor frozen.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Result, SlabError};
use crate::model::{Model, NormKind};
use crate::normalization::{recalibrate_stats, Mode};
use crate::tensor::{Float, Tensor};

// ---- configuration ---------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub droppath_rate: f64,
    /// LN → RepBN decay length in optimizer steps. `None` uses the steps of
    /// the first 80% of training.
    pub prepbn_decay_steps: Option<u64>,
    pub recalib_epochs: usize,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Where the CLI writes line-delimited metrics; relative paths resolve
    /// against the run directory. Defaults to `metrics.jsonl`.
    pub metrics_path: Option<PathBuf>,
}

/// Reference batch size and learning rate the toy learning rate is scaled from.
pub const REFERENCE_BATCH: usize = 1024;
pub const REFERENCE_LR: f64 = 1e-3;
pub const DECAY_FRACTION: f64 = 0.8;

impl Default for TrainConfig {
    fn default() -> Self {
        let batch_size = 128;
        Self {
            epochs: 30,
            batch_size,
            base_lr: REFERENCE_LR * batch_size as f64 / REFERENCE_BATCH as f64,
            warmup_epochs: 2,
            weight_decay: 0.05,
            droppath_rate: 0.0,
            prepbn_decay_steps: None,
            recalib_epochs: 2,
            label_smoothing: 0.1,
            seed: 0,
            metrics_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| {
            Err(SlabError::Config {
                section: "train".into(),
                message: m,
            })
        };
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("weight_decay", self.weight_decay),
            ("droppath_rate", self.droppath_rate),
            ("label_smoothing", self.label_smoothing),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.droppath_rate >= 1.0 {
            return bad(format!("droppath_rate {} must be below 1", self.droppath_rate));
        }
        if self.label_smoothing >= 1.0 {
            return bad(format!("label_smoothing {} must be below 1", self.label_smoothing));
        }
        Ok(())
    }
}

// ---- learning rate ---------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

/// Linear ramp from 0 to `base_lr` over the warmup, then half a cosine down
/// to 0 at `total_steps`.
pub fn lr_at(step: u64, s: &LrSchedule) -> f64 {
    if step < s.warmup_steps {
        return s.base_lr * step as f64 / s.warmup_steps as f64;
    }
    if step >= s.total_steps {
        return 0.0;
    }
    let span = (s.total_steps - s.warmup_steps) as f64;
    let progress = (step - s.warmup_steps) as f64 / span;
    0.5 * s.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

// ---- optimizer -------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Float> AdamState<T> {
    pub fn new(shapes: &[&[usize]]) -> Self {
        Self {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }
}

/// One AdamW update. `decay[i]` selects which tensors receive weight decay.
pub fn optimizer_step<T: Float>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    decay: &[bool],
    state: &mut AdamState<T>,
    cfg: &AdamW,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != decay.len() {
        return Err(SlabError::shape(
            "optimizer_step",
            format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, p) in params.iter().enumerate() {
        if p.shape() != grads[i].shape() || p.shape() != state.m[i].shape() {
            return Err(SlabError::shape(
                "optimizer_step",
                format!("param {:?}, grad {:?}, moment {:?}", p.shape(), grads[i].shape(), state.m[i].shape()),
            ));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let c1 = T::c(1.0 / (1.0 - cfg.beta1.powi(t)));
    let c2 = T::c(1.0 / (1.0 - cfg.beta2.powi(t)));
    let lr = T::c(cfg.lr);
    let eps = T::c(cfg.eps);
    let one = T::one();
    for (i, p) in params.iter_mut().enumerate() {
        let shrink = if decay[i] { T::c(1.0 - cfg.lr * cfg.weight_decay) } else { one };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((w, &g), mi), vi) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v.iter_mut()) {
            *mi = b1 * *mi + (one - b1) * g;
            *vi = b2 * *vi + (one - b2) * g * g;
            let mhat = *mi * c1;
            let vhat = *vi * c2;
            *w = *w * shrink - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

// ---- droppath --------------------------------------------------------

/// Per-sample multipliers: 0 with probability `rate`, otherwise `1/(1−rate)`.
pub fn droppath_mask<R: Rng + ?Sized>(samples: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 - rate;
    (0..samples)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}

/// Stochastic depth over the leading (sample) axis. Identity in eval mode
/// and at rate 0.
pub fn droppath<T: Float, R: Rng + ?Sized>(x: &Tensor<T>, rate: f64, mode: Mode, rng: &mut R) -> Tensor<T> {
    if mode == Mode::Eval || rate == 0.0 || x.ndim() == 0 {
        return x.clone();
    }
    let samples = x.shape()[0];
    let mask = droppath_mask(samples, rate, rng);
    let per = if samples == 0 { 0 } else { x.numel() / samples };
    let mut out = x.clone();
    for (chunk, &m) in out.data_mut().chunks_mut(per.max(1)).zip(&mask) {
        let m = T::c(m);
        chunk.iter_mut().for_each(|v| *v *= m);
    }
    out
}

// ---- data ------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    SyntheticClusters,
    ImageFolder,
    CsvTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    /// Root directory (image-folder) or file (csv-tokens).
    pub path: Option<PathBuf>,
    pub train_fraction: f64,
    /// Sample count of the synthetic task.
    pub samples: usize,
    pub num_classes: usize,
    /// Per-sample shape: `[channels, height, width]` for images,
    /// `[tokens, features]` for token rows.
    pub input_shape: Vec<usize>,
    /// Noise level of the synthetic task relative to unit-variance prototypes.
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: DataSource::SyntheticClusters,
            path: None,
            train_fraction: 0.8,
            samples: 2000,
            num_classes: 10,
            input_shape: vec![3, 16, 16],
            noise: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    /// `[samples, ...input_shape]`
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Float> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Inputs and labels at `indices`, stacked.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let per: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * per..(i + 1) * per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let t = Tensor::new(shape, data).expect("gathered sizes match");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Consecutive batches in index order.
    pub fn batches(&self, batch_size: usize) -> Vec<Tensor<T>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1)).map(|c| self.gather(c).0).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Dataset<T>,
    pub test: Dataset<T>,
}

fn data_err(m: impl Into<String>) -> SlabError {
    SlabError::Data(m.into())
}

/// Deterministic shuffle then split by `train_fraction`.
fn split<T: Float>(inputs: Vec<Vec<T>>, labels: Vec<usize>, shape: &[usize], spec: &DatasetSpec) -> Result<Split<T>> {
    if inputs.is_empty() {
        return Err(data_err("dataset is empty"));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(SlabError::Config {
            section: "data".into(),
            message: format!("train_fraction {} must lie in (0, 1)", spec.train_fraction),
        });
    }
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_da7a));
    let n_train = ((inputs.len() as f64) * spec.train_fraction).round() as usize;
    let n_train = n_train.clamp(1, inputs.len().saturating_sub(1).max(1));
    let build = |ids: &[usize]| -> Result<Dataset<T>> {
        let mut s = vec![ids.len()];
        s.extend_from_slice(shape);
        let data = ids.iter().flat_map(|&i| inputs[i].iter().copied()).collect();
        Ok(Dataset {
            inputs: Tensor::new(s, data)?,
            labels: ids.iter().map(|&i| labels[i]).collect(),
        })
    };
    Ok(Split {
        train: build(&order[..n_train])?,
        test: build(&order[n_train..])?,
    })
}

/// Class prototypes with unit-variance pixels; each sample is its class
/// prototype plus Gaussian noise of standard deviation `noise`.
fn synthetic_clusters<T: Float>(spec: &DatasetSpec) -> Result<Split<T>> {
    if spec.num_classes == 0 || spec.samples == 0 {
        return Err(data_err("synthetic task needs classes and samples"));
    }
    let per: usize = spec.input_shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos: Vec<Tensor<f64>> = (0..spec.num_classes)
        .map(|_| Tensor::randn(&[per], 1.0, &mut rng))
        .collect();
    let mut inputs = Vec::with_capacity(spec.samples);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let k = i % spec.num_classes;
        let noise = Tensor::<f64>::randn(&[per], spec.noise, &mut rng);
        inputs.push(
            protos[k]
                .data()
                .iter()
                .zip(noise.data())
                .map(|(&p, &e)| T::c(p + e))
                .collect(),
        );
        labels.push(k);
    }
    split(inputs, labels, &spec.input_shape, spec)
}

/// `root/<class>/<image>`; classes in sorted directory order, images resized
/// to `input_shape` and scaled to `[-1, 1]`.
fn image_folder<T: Float>(spec: &DatasetSpec) -> Result<Split<T>> {
    let root = spec
        .path
        .as_ref()
        .ok_or_else(|| data_err("image-folder needs a path"))?;
    let [c, h, w] = spec.input_shape[..] else {
        return Err(data_err("image-folder input_shape must be [channels, height, width]"));
    };
    if c != 1 && c != 3 {
        return Err(data_err(format!("image-folder supports 1 or 3 channels, got {c}")));
    }
    let mut classes: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| SlabError::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(data_err(format!("no class directories under {}", root.display())));
    }
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (k, dir) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| SlabError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            let img = image::open(&f).map_err(|e| data_err(format!("{}: {e}", f.display())))?;
            let img = img.resize_exact(w as u32, h as u32, image::imageops::FilterType::Triangle);
            let mut sample = vec![T::zero(); c * h * w];
            if c == 1 {
                let g = img.to_luma8();
                for (i, p) in g.pixels().enumerate() {
                    sample[i] = T::c(p[0] as f64 / 127.5 - 1.0);
                }
            } else {
                let rgb = img.to_rgb8();
                for (i, p) in rgb.pixels().enumerate() {
                    for ch in 0..3 {
                        sample[ch * h * w + i] = T::c(p[ch] as f64 / 127.5 - 1.0);
                    }
                }
            }
            inputs.push(sample);
            labels.push(k);
        }
    }
    split(inputs, labels, &spec.input_shape, spec)
}

/// One sample per record: the label, then `tokens·features` values.
fn csv_tokens<T: Float>(spec: &DatasetSpec) -> Result<Split<T>> {
    let path = spec
        .path
        .as_ref()
        .ok_or_else(|| data_err("csv-tokens needs a path"))?;
    let per: usize = spec.input_shape.iter().product();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| data_err(format!("{}: {e}", path.display())))?;
        let Ok(label) = rec[0].parse::<usize>() else {
            if line == 0 {
                continue;
            }
            return Err(data_err(format!("line {}: bad label {:?}", line + 1, &rec[0])));
        };
        if label >= spec.num_classes {
            return Err(data_err(format!("line {}: label {label} >= {} classes", line + 1, spec.num_classes)));
        }
        if rec.len() != per + 1 {
            return Err(data_err(format!("line {}: expected {} values, got {}", line + 1, per, rec.len() - 1)));
        }
        let sample = rec
            .iter()
            .skip(1)
            .map(|f| f.parse::<f64>().map(T::c))
            .collect::<std::result::Result<Vec<T>, _>>()
            .map_err(|e| data_err(format!("line {}: {e}", line + 1)))?;
        inputs.push(sample);
        labels.push(label);
    }
    split(inputs, labels, &spec.input_shape, spec)
}

pub fn load_dataset<T: Float>(spec: &DatasetSpec) -> Result<Split<T>> {
    match spec.source {
        DataSource::SyntheticClusters => synthetic_clusters(spec),
        DataSource::ImageFolder => image_folder(spec),
        DataSource::CsvTokens => csv_tokens(spec),
    }
}

// ---- training loop ---------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Record {
    Step {
        step: u64,
        epoch: usize,
        lr: f64,
        gamma: f64,
        loss: f64,
        acc: f64,
    },
    Epoch {
        epoch: usize,
        lr: f64,
        gamma: f64,
        loss: f64,
        acc: f64,
        test_acc: f64,
    },
    Recalibration {
        epochs: usize,
        test_acc: f64,
        /// Held-out cross-entropy before and after the statistics refresh.
        test_loss_before: f64,
        test_loss_after: f64,
    },
}

#[derive(Debug, Clone, Default)]
pub struct TrainedArtifacts {
    pub records: Vec<Record>,
    pub steps: u64,
    pub decay_steps: u64,
    pub final_test_acc: Option<f64>,
}

impl TrainedArtifacts {
    /// `(step, γ)` for every optimizer step.
    pub fn gamma_trace(&self) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                Record::Step { step, gamma, .. } => Some((*step, *gamma)),
                _ => None,
            })
            .collect()
    }

    /// Mean training loss per epoch.
    pub fn epoch_losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                Record::Epoch { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r).map_err(|e| data_err(e.to_string()))?;
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| SlabError::io(path, e))?;
        f.write_all(&out).map_err(|e| SlabError::io(path, e))
    }
}

fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn correct<T: Float>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.last_dim();
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Eval-mode mean cross-entropy (no smoothing) over `data`.
pub fn evaluate_loss<T: Float>(model: &Model<T>, data: &Dataset<T>, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.gather(chunk);
        let logits = model.forward(&x)?;
        for (row, &l) in logits.data().chunks(logits.last_dim()).zip(&y) {
            let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln();
            total += lse - row[l].f64();
        }
    }
    Ok(total / data.len() as f64)
}

/// Eval-mode accuracy over `data`.
pub fn evaluate<T: Float>(model: &Model<T>, data: &Dataset<T>, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut hits = 0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.gather(chunk);
        hits += correct(&model.forward(&x)?, &y);
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Trains `model` in place. On a non-finite loss the offending step is not
/// applied, so `model` holds the last good parameters when
/// [`SlabError::DivergedLoss`] is returned.
pub fn train<T: Float>(model: &mut Model<T>, data: &Split<T>, cfg: &TrainConfig) -> Result<TrainedArtifacts> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(TrainedArtifacts::default());
    }
    if data.train.is_empty() {
        return Err(SlabError::EmptyStream);
    }
    model.config.droppath_rate = cfg.droppath_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size) as u64;
    let total = steps_per_epoch * cfg.epochs as u64;
    let decay_steps = cfg
        .prepbn_decay_steps
        .unwrap_or((total as f64 * DECAY_FRACTION).floor() as u64);
    model.set_decay_steps(decay_steps);
    let sched = LrSchedule {
        base_lr: cfg.base_lr,
        warmup_steps: steps_per_epoch * cfg.warmup_epochs as u64,
        total_steps: total,
    };

    let names: Vec<(String, bool)> = model
        .named_tensors()
        .into_iter()
        .filter(|n| n.learnable)
        .map(|n| (n.name.clone(), n.tensor.ndim() >= 2))
        .collect();
    let decay: Vec<bool> = names.iter().map(|n| n.1).collect();
    let shapes: Vec<Vec<usize>> = model
        .named_tensors()
        .into_iter()
        .filter(|n| n.learnable)
        .map(|n| n.tensor.shape().to_vec())
        .collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut adam = AdamState::<T>::new(&shape_refs);

    let mut out = TrainedArtifacts {
        decay_steps,
        ..Default::default()
    };
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0usize, 0usize);
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.train.gather(chunk);
            lr = lr_at(step, &sched);
            let gamma = model.gamma();
            let mut tape = Tape::new();
            let fw = model.forward_tape(&mut tape, &x, Some(&mut rng as &mut dyn RngCore))?;
            let loss = tape.cross_entropy(fw.logits, &y, T::c(cfg.label_smoothing))?;
            let loss_value = tape.value(loss).item().f64();
            if !loss_value.is_finite() {
                return Err(SlabError::DivergedLoss { step: step as usize });
            }
            let batch_hits = correct(tape.value(fw.logits), &y);
            tape.backward(loss)?;
            let by_name: HashMap<&str, _> = fw.params.iter().map(|(n, v)| (n.as_str(), *v)).collect();
            let grads: Vec<Tensor<T>> = names
                .iter()
                .zip(&shapes)
                .map(|((n, _), s)| {
                    by_name
                        .get(n.as_str())
                        .and_then(|&v| tape.grad(v).cloned())
                        .unwrap_or_else(|| Tensor::zeros(s))
                })
                .collect();
            let mut params: Vec<&mut Tensor<T>> = model
                .named_tensors_mut()
                .into_iter()
                .filter(|n| n.learnable)
                .map(|n| n.tensor)
                .collect();
            optimizer_step(&mut params, &grads, &decay, &mut adam, &AdamW::new(lr, cfg.weight_decay))?;
            model.apply_batch_stats(&fw.stats);
            model.advance_schedules();

            out.records.push(Record::Step {
                step,
                epoch,
                lr,
                gamma,
                loss: loss_value,
                acc: batch_hits as f64 / y.len() as f64,
            });
            loss_sum += loss_value * y.len() as f64;
            hits += batch_hits;
            seen += y.len();
            step += 1;
        }
        let test_acc = evaluate(model, &data.test, cfg.batch_size)?;
        out.records.push(Record::Epoch {
            epoch,
            lr,
            gamma: model.gamma(),
            loss: loss_sum / seen as f64,
            acc: hits as f64 / seen as f64,
            test_acc,
        });
        out.final_test_acc = Some(test_acc);
    }
    out.steps = step;

    let has_bn = matches!(model.config.norm_kind, NormKind::PRepBN | NormKind::BatchNorm) && !model.config.fused;
    // Only a finished LN → BN transition has statistics worth refreshing.
    if has_bn && cfg.recalib_epochs > 0 && model.gamma() == 0.0 {
        let test_loss_before = evaluate_loss(model, &data.test, cfg.batch_size)?;
        let batches = data.train.batches(cfg.batch_size);
        recalibrate_stats(model, &batches, cfg.recalib_epochs)?;
        let test_acc = evaluate(model, &data.test, cfg.batch_size)?;
        out.records.push(Record::Recalibration {
            epochs: cfg.recalib_epochs,
            test_acc,
            test_loss_before,
            test_loss_after: evaluate_loss(model, &data.test, cfg.batch_size)?,
        });
        out.final_test_acc = Some(test_acc);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::TokenGrid;
    use crate::model::{AttnKind, ModelConfig};
    use crate::normalization::{schedule_gamma, DecaySchedule};

    #[test]
    fn lr_schedule_landmarks() {
        let s = LrSchedule {
            base_lr: 0.4,
            warmup_steps: 10,
            total_steps: 110,
        };
        assert_eq!(lr_at(0, &s), 0.0);
        assert_eq!(lr_at(5, &s), 0.2);
        assert_eq!(lr_at(10, &s), 0.4);
        assert!((lr_at(60, &s) - 0.2).abs() < 1e-15);
        assert_eq!(lr_at(110, &s), 0.0);
        let mut prev = f64::INFINITY;
        for t in 10..=110 {
            assert!(lr_at(t, &s) <= prev);
            prev = lr_at(t, &s);
        }
    }

    fn one_param(v: f64) -> (Tensor<f64>, AdamState<f64>) {
        (Tensor::vector(vec![v]), AdamState::new(&[&[1]]))
    }

    #[test]
    fn adamw_hand_cases() {
        let (mut p, mut st) = one_param(0.7);
        let cfg = AdamW::new(0.01, 0.0);
        optimizer_step(&mut [&mut p], &[Tensor::vector(vec![0.0])], &[true], &mut st, &cfg).unwrap();
        assert_eq!(p.item(), 0.7);

        let (mut p, mut st) = one_param(0.7);
        optimizer_step(&mut [&mut p], &[Tensor::vector(vec![1.0])], &[true], &mut st, &cfg).unwrap();
        assert!((p.item() - (0.7 - 0.01)).abs() < 1e-9);

        let (mut p, mut st) = one_param(2.0);
        let cfg = AdamW::new(0.1, 0.5);
        optimizer_step(&mut [&mut p], &[Tensor::vector(vec![0.0])], &[true], &mut st, &cfg).unwrap();
        assert!((p.item() - 2.0 * (1.0 - 0.05)).abs() < 1e-15);

        let (mut p, mut st) = one_param(2.0);
        let bad = optimizer_step(&mut [&mut p], &[Tensor::vector(vec![0.0, 1.0])], &[true], &mut st, &cfg);
        assert!(matches!(bad, Err(SlabError::ShapeMismatch { .. })));
    }

    #[test]
    fn droppath_modes_and_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::ones(&[100_000, 2]);
        assert_eq!(droppath(&x, 0.0, Mode::Train, &mut rng), x);
        assert_eq!(droppath(&x, 0.7, Mode::Eval, &mut rng), x);
        let y = droppath(&x, 0.5, Mode::Train, &mut rng);
        let rows: Vec<&[f64]> = y.data().chunks(2).collect();
        assert!(rows.iter().all(|r| r[0] == r[1] && (r[0] == 0.0 || r[0] == 2.0)));
        let kept = rows.iter().filter(|r| r[0] != 0.0).count() as f64 / rows.len() as f64;
        assert!((kept - 0.5).abs() < 0.01, "{kept}");
    }

    fn small_setup(norm_kind: NormKind, attn_kind: AttnKind) -> (Model<f64>, Split<f64>, TrainConfig) {
        let mcfg = ModelConfig {
            depth: 1,
            dim: 8,
            heads: 2,
            mlp_ratio: 2.0,
            norm_kind,
            attn_kind,
            grid: TokenGrid::new(2, 2),
            num_classes: 3,
            patch_size: 2,
            in_channels: 1,
            ..ModelConfig::default()
        };
        let spec = DatasetSpec {
            samples: 60,
            num_classes: 3,
            input_shape: vec![1, 4, 4],
            ..DatasetSpec::default()
        };
        let model = Model::init(&mcfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 16,
            base_lr: 1e-2,
            warmup_epochs: 1,
            recalib_epochs: 1,
            seed: 3,
            ..TrainConfig::default()
        };
        (model, load_dataset(&spec).unwrap(), cfg)
    }

    #[test]
    fn zero_epochs_changes_nothing() {
        let (mut m, data, cfg) = small_setup(NormKind::PRepBN, AttnKind::Sla);
        let before = m.clone();
        let a = train(&mut m, &data, &TrainConfig { epochs: 0, warmup_epochs: 0, ..cfg }).unwrap();
        assert!(a.records.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn gamma_trace_follows_the_linear_schedule() {
        let (mut m, data, cfg) = small_setup(NormKind::PRepBN, AttnKind::Sla);
        let a = train(&mut m, &data, &cfg).unwrap();
        let trace = a.gamma_trace();
        assert_eq!(trace.len() as u64, a.steps);
        assert_eq!(trace[0].1, 1.0);
        assert_eq!(trace.last().unwrap().1, 0.0);
        for (i, &(step, g)) in trace.iter().enumerate() {
            assert_eq!(step, i as u64);
            assert_eq!(g, schedule_gamma(DecaySchedule::Linear, step, a.decay_steps));
        }
        assert!(trace.windows(2).all(|w| w[1].1 <= w[0].1));
        assert_eq!(m.gamma(), 0.0);
    }

    #[test]
    fn runs_are_deterministic() {
        let (m0, data, cfg) = small_setup(NormKind::PRepBN, AttnKind::Softmax);
        let cfg = TrainConfig { droppath_rate: 0.2, ..cfg };
        let (mut a, mut b) = (m0.clone(), m0);
        train(&mut a, &data, &cfg).unwrap();
        train(&mut b, &data, &cfg).unwrap();
        assert_eq!(
            crate::model::checkpoint_bytes(&a).unwrap(),
            crate::model::checkpoint_bytes(&b).unwrap()
        );
    }

    #[test]
    fn divergence_keeps_last_good_parameters() {
        let (mut m, data, cfg) = small_setup(NormKind::LayerNorm, AttnKind::Softmax);
        let cfg = TrainConfig {
            base_lr: 1e300,
            warmup_epochs: 0,
            ..cfg
        };
        match train(&mut m, &data, &cfg) {
            Err(SlabError::DivergedLoss { step }) => assert!(step > 0),
            other => panic!("expected divergence, got {other:?}"),
        }
        assert!(m.named_tensors().iter().all(|n| n.tensor.all_finite()));
    }

    #[test]
    fn csv_tokens_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut text = String::from("label,f0,f1,f2,f3\n");
        for i in 0..10 {
            text.push_str(&format!("{},{},1,2,3\n", i % 2, i));
        }
        std::fs::write(&path, text).unwrap();
        let spec = DatasetSpec {
            source: DataSource::CsvTokens,
            path: Some(path),
            num_classes: 2,
            input_shape: vec![2, 2],
            ..DatasetSpec::default()
        };
        let s = load_dataset::<f64>(&spec).unwrap();
        assert_eq!(s.train.len() + s.test.len(), 10);
        assert_eq!(s.train.sample_shape(), &[2, 2]);
        let again = load_dataset::<f64>(&spec).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn image_folder_loads_classes_in_order() {
        let dir = tempfile::tempdir().unwrap();
        for (k, name) in ["cat", "dog"].iter().enumerate() {
            let d = dir.path().join(name);
            std::fs::create_dir(&d).unwrap();
            for i in 0..3 {
                let img = image::RgbImage::from_pixel(8, 8, image::Rgb([k as u8 * 255, i * 40, 0]));
                img.save(d.join(format!("{i}.png"))).unwrap();
            }
        }
        let spec = DatasetSpec {
            source: DataSource::ImageFolder,
            path: Some(dir.path().to_path_buf()),
            num_classes: 2,
            input_shape: vec![3, 4, 4],
            train_fraction: 0.5,
            ..DatasetSpec::default()
        };
        let s = load_dataset::<f32>(&spec).unwrap();
        let all: Vec<(usize, f32)> = s
            .train
            .labels
            .iter()
            .enumerate()
            .map(|(i, &l)| (l, s.train.inputs.data()[i * 48]))
            .chain(s.test.labels.iter().enumerate().map(|(i, &l)| (l, s.test.inputs.data()[i * 48])))
            .collect();
        assert_eq!(all.len(), 6);
        for (l, red) in all {
            assert_eq!(red, if l == 0 { -1.0 } else { 1.0 });
        }
    }
}
