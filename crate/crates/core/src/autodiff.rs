//! Reverse-mode differentiation over a recorded tape.
//!
//! Every op appends a node holding its forward value. [`Tape::backward`] walks
//! the nodes in reverse and accumulates vector-Jacobian products into every
//! node that (transitively) depends on a leaf created with [`Tape::leaf`].
//! A tape is single-threaded; independent tapes may live on separate threads.

use crate::error::{Result, SlabError};
use crate::tensor::kernels;
use crate::tensor::ops;
use crate::tensor::{Float, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MulRow(Var, Var),
    /// Batched `op(a) · op(b)`; rank-2 operands are one group.
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SumAxis1(Var),
    RowDiv {
        num: Var,
        den: Var,
        eps: T,
    },
    LayerNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormTrain {
        x: Var,
        alpha: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        alpha: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    DwcTokens {
        x: Var,
        kernel: Var,
        batch: usize,
        h: usize,
        w: usize,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
    },
    MeanPool {
        x: Var,
        batch: usize,
    },
    CrossEntropy {
        logits: Var,
        target: Vec<T>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics observed by a train-mode batch norm on the tape.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> SlabError {
    SlabError::shape(op, format!("{a:?} vs {b:?}"))
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = ops::scale(self.value(a), s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let v = ops::add_row(self.value(x), self.value(row))?;
        Ok(self.push(v, Op::AddRow(x, row), &[x, row]))
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let v = ops::mul_row(self.value(x), self.value(row))?;
        Ok(self.push(v, Op::MulRow(x, row), &[x, row]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = ops::relu(self.value(x));
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = ops::gelu(self.value(x));
        self.push(v, Op::Gelu(x), &[x])
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let v = ops::softmax_lastdim(self.value(x));
        self.push(v, Op::Softmax(x), &[x])
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / T::c(t.numel() as f64));
        self.push(v, Op::Mean(x), &[x])
    }

    /// `[g, n, d] -> [g, 1, d]`
    pub fn sum_axis1(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 3 {
            return Err(SlabError::shape("sum_axis1", format!("{:?}", t.shape())));
        }
        let (g, n, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let mut out = vec![T::zero(); g * d];
        for gi in 0..g {
            for ni in 0..n {
                let row = &t.data()[(gi * n + ni) * d..][..d];
                for (o, &r) in out[gi * d..(gi + 1) * d].iter_mut().zip(row) {
                    *o += r;
                }
            }
        }
        let v = Tensor::new(vec![g, 1, d], out)?;
        Ok(self.push(v, Op::SumAxis1(x), &[x]))
    }

    /// `num[g, n, p] / (den[g, n, 1] + eps)`
    pub fn row_div(&mut self, num: Var, den: Var, eps: T) -> Result<Var> {
        let (tn, td) = (self.value(num), self.value(den));
        let s = tn.shape();
        if tn.ndim() != 3 || td.shape() != [s[0], s[1], 1] {
            return Err(shape_err("row_div", tn.shape(), td.shape()));
        }
        let p = s[2];
        let mut out = tn.data().to_vec();
        for (row, &d) in out.chunks_mut(p).zip(td.data()) {
            let inv = T::one() / (d + eps);
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let v = Tensor::new(s.to_vec(), out)?;
        Ok(self.push(v, Op::RowDiv { num, den, eps }, &[num, den]))
    }

    // ---- linear algebra ---------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` transposes the last two axes when its flag
    /// is set. Operands are rank 2, or rank 3 with a shared leading group axis.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let v = gemm_value(self.value(a), ta, self.value(b), tb)
            .ok_or_else(|| shape_err("matmul", &sa, &sb))?;
        Ok(self.push(v, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = ops::transpose(self.value(x))?;
        Ok(self.push(v, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// `x · w + b` on token rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    // ---- normalization ----------------------------------------------

    /// Per-row normalization over the last axis, then `scale`/`shift`.
    pub fn layernorm(&mut self, x: Var, scale: Var, shift: Var, eps: T) -> Result<Var> {
        let t = self.value(x);
        let c = t.last_dim();
        if self.value(scale).numel() != c || self.value(shift).numel() != c {
            return Err(shape_err("layernorm", t.shape(), self.shape(scale)));
        }
        let rows = t.rows();
        let mut xhat = vec![T::zero(); t.numel()];
        let mut inv_std = vec![T::zero(); rows];
        for (r, (row, out)) in t.data().chunks(c).zip(xhat.chunks_mut(c)).enumerate() {
            let mean = row.iter().copied().sum::<T>() / T::c(c as f64);
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / T::c(c as f64);
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for (o, &a) in out.iter_mut().zip(row) {
                *o = (a - mean) * inv;
            }
        }
        let value = affine_rows(&xhat, self.value(scale).data(), self.value(shift).data(), t.shape());
        let op = Op::LayerNorm {
            x,
            scale,
            shift,
            xhat,
            inv_std,
        };
        Ok(self.push(value, op, &[x, scale, shift]))
    }

    /// Batch norm over all rows of `x: [rows × c]` using batch statistics.
    /// Returns the output and the observed batch statistics.
    pub fn batchnorm_train(&mut self, x: Var, alpha: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let t = self.value(x);
        let c = t.last_dim();
        if self.value(alpha).numel() != c || self.value(beta).numel() != c || t.ndim() != 2 {
            return Err(shape_err("batchnorm_train", t.shape(), self.shape(alpha)));
        }
        if t.rows() < 2 {
            return Err(SlabError::BatchTooSmall(t.rows()));
        }
        let (mean, var) = ops::column_moments(t.data(), c);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat = normalize_cols(t.data(), &mean, &inv_std);
        let value = affine_rows(&xhat, self.value(alpha).data(), self.value(beta).data(), t.shape());
        let op = Op::BatchNormTrain {
            x,
            alpha,
            beta,
            xhat,
            inv_std,
        };
        Ok((self.push(value, op, &[x, alpha, beta]), BatchStats { mean, var }))
    }

    /// Batch norm with frozen statistics `mean`, `var`.
    pub fn batchnorm_eval(&mut self, x: Var, alpha: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let t = self.value(x);
        let c = t.last_dim();
        if self.value(alpha).numel() != c || self.value(beta).numel() != c || mean.len() != c || var.len() != c {
            return Err(shape_err("batchnorm_eval", t.shape(), self.shape(alpha)));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat = normalize_cols(t.data(), mean, &inv_std);
        let value = affine_rows(&xhat, self.value(alpha).data(), self.value(beta).data(), t.shape());
        let op = Op::BatchNormEval {
            x,
            alpha,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(value, op, &[x, alpha, beta]))
    }

    // ---- attention plumbing -----------------------------------------

    /// Depthwise same-padded convolution of `batch` token grids stacked as
    /// `[batch·h·w × c]`, kernel `[c×k×k]`.
    pub fn dwc_tokens(&mut self, x: Var, kernel: Var, batch: usize, h: usize, w: usize) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 || t.shape()[0] != batch * h * w {
            return Err(SlabError::GridMismatch {
                height: h,
                width: w,
                tokens: t.rows(),
            });
        }
        let c = t.shape()[1];
        let kt = self.value(kernel);
        if kt.ndim() != 3 || kt.shape()[0] != c || kt.shape()[1] != kt.shape()[2] {
            return Err(shape_err("dwc_tokens", t.shape(), kt.shape()));
        }
        let k = kt.shape()[1];
        if k % 2 == 0 {
            return Err(SlabError::InvalidKernel(format!("kernel size {k} is even")));
        }
        let taps = ops::taps_major(kt.data(), c, k);
        let n = h * w;
        let mut out = vec![T::zero(); t.numel()];
        for b in 0..batch {
            let span = b * n * c..(b + 1) * n * c;
            ops::dwc_tokens_raw(&t.data()[span.clone()], &taps, h, w, c, k, &mut out[span]);
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(
            v,
            Op::DwcTokens {
                x,
                kernel,
                batch,
                h,
                w,
            },
            &[x, kernel],
        ))
    }

    /// Depthwise convolution of `x: [c×h×w]` with `kernel: [c×k×k]`.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(SlabError::shape("depthwise_conv2d", format!("{s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let flat = self.reshape(x, &[c, h * w])?;
        let tokens = self.transpose(flat)?;
        let y = self.dwc_tokens(tokens, kernel, 1, h, w)?;
        let back = self.transpose(y)?;
        self.reshape(back, &[c, h, w])
    }

    /// `[batch·n × heads·d] -> [batch·heads × n × d]`
    pub fn split_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 || t.shape()[0] % batch != 0 || t.shape()[1] % heads != 0 {
            return Err(SlabError::shape("split_heads", format!("{:?}", t.shape())));
        }
        let n = t.shape()[0] / batch;
        let c = t.shape()[1];
        let d = c / heads;
        let mut out = vec![T::zero(); t.numel()];
        for b in 0..batch {
            for hh in 0..heads {
                for i in 0..n {
                    let src = &t.data()[(b * n + i) * c + hh * d..][..d];
                    out[((b * heads + hh) * n + i) * d..][..d].copy_from_slice(src);
                }
            }
        }
        let v = Tensor::new(vec![batch * heads, n, d], out)?;
        Ok(self.push(v, Op::SplitHeads { x, batch, heads }, &[x]))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 3 || t.shape()[0] % heads != 0 {
            return Err(SlabError::shape("merge_heads", format!("{:?}", t.shape())));
        }
        let (g, n, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let batch = g / heads;
        let out = merge_heads_raw(t.data(), batch, heads, n, d);
        let v = Tensor::new(vec![batch * n, heads * d], out)?;
        Ok(self.push(v, Op::MergeHeads { x, heads }, &[x]))
    }

    /// Mean over the `n` tokens of each of `batch` samples: `[batch·n × c] -> [batch × c]`.
    pub fn mean_pool(&mut self, x: Var, batch: usize) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 || batch == 0 || t.shape()[0] % batch != 0 {
            return Err(SlabError::shape("mean_pool", format!("{:?}", t.shape())));
        }
        let n = t.shape()[0] / batch;
        let c = t.shape()[1];
        let inv = T::one() / T::c(n as f64);
        let mut out = vec![T::zero(); batch * c];
        for b in 0..batch {
            for i in 0..n {
                let row = &t.data()[(b * n + i) * c..][..c];
                for (o, &r) in out[b * c..(b + 1) * c].iter_mut().zip(row) {
                    *o += r;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let v = Tensor::new(vec![batch, c], out)?;
        Ok(self.push(v, Op::MeanPool { x, batch }, &[x]))
    }

    /// Mean label-smoothed cross-entropy of `logits: [b × k]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: T) -> Result<Var> {
        let t = self.value(logits);
        if t.ndim() != 2 || t.shape()[0] != labels.len() {
            return Err(SlabError::shape(
                "cross_entropy",
                format!("logits {:?}, {} labels", t.shape(), labels.len()),
            ));
        }
        let (b, k) = (t.shape()[0], t.shape()[1]);
        if labels.iter().any(|&l| l >= k) {
            return Err(SlabError::Data(format!("label out of range for {k} classes")));
        }
        let off = smoothing / T::c(k as f64);
        let on = T::one() - smoothing + off;
        let mut target = vec![off; b * k];
        for (i, &l) in labels.iter().enumerate() {
            target[i * k + l] = on;
        }
        let probs = ops::softmax_lastdim(t).into_data();
        let mut loss = T::zero();
        for (row, q) in t.data().chunks(k).zip(target.chunks(k)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            for (&z, &qk) in row.iter().zip(q) {
                loss += qk * (lse - z);
            }
        }
        let v = Tensor::scalar(loss / T::c(b as f64));
        Ok(self.push(v, Op::CrossEntropy { logits, target, probs }, &[logits]))
    }

    // ---- backward ---------------------------------------------------

    /// Populates gradients of the scalar `loss` for every node that depends
    /// on a leaf. Contributions from several uses of a node are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(SlabError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, d: Tensor<T>| accumulate(grads, v, d, needs(v));
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, ops::mul(g, val(*b)).expect("mul grad"));
                }
                if needs(*b) {
                    acc(*b, ops::mul(g, val(*a)).expect("mul grad"));
                }
            }
            Op::Scale(a, s) => acc(*a, ops::scale(g, *s)),
            Op::AddRow(x, row) => {
                acc(*x, g.clone());
                if needs(*row) {
                    acc(*row, col_sums(gd, val(*row).numel(), val(*row).shape()));
                }
            }
            Op::MulRow(x, row) => {
                if needs(*x) {
                    acc(*x, ops::mul_row(g, val(*row)).expect("mul_row grad"));
                }
                if needs(*row) {
                    let prod = ops::mul(g, val(*x)).expect("mul_row grad");
                    acc(*row, col_sums(prod.data(), val(*row).numel(), val(*row).shape()));
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(*a), val(*b));
                // C = op(A) op(B)
                if needs(*a) {
                    let d = match (ta, tb) {
                        (false, false) => gemm_value(g, false, bv, true),
                        (false, true) => gemm_value(g, false, bv, false),
                        (true, false) => gemm_value(bv, false, g, true),
                        (true, true) => gemm_value(bv, true, g, true),
                    }
                    .expect("matmul grad a");
                    acc(*a, d.reshape(av.shape()).expect("matmul grad a shape"));
                }
                if needs(*b) {
                    let d = match (ta, tb) {
                        (false, false) => gemm_value(av, true, g, false),
                        (false, true) => gemm_value(g, true, av, false),
                        (true, false) => gemm_value(av, false, g, false),
                        (true, true) => gemm_value(g, true, av, true),
                    }
                    .expect("matmul grad b");
                    acc(*b, d.reshape(bv.shape()).expect("matmul grad b shape"));
                }
            }
            Op::Transpose(x) => acc(*x, ops::transpose(g).expect("transpose grad")),
            Op::Reshape(x) => acc(*x, g.clone().reshape(val(*x).shape()).expect("reshape grad")),
            Op::Relu(x) => {
                let xv = val(*x);
                let d = g
                    .zip_map(xv, "relu grad", |gv, xv| if xv > T::zero() { gv } else { T::zero() })
                    .expect("relu grad");
                acc(*x, d);
            }
            Op::Gelu(x) => {
                let d = g
                    .zip_map(val(*x), "gelu grad", |gv, xv| gv * ops::gelu_grad_scalar(xv))
                    .expect("gelu grad");
                acc(*x, d);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.last_dim();
                let mut d = vec![T::zero(); y.numel()];
                for ((dr, yr), gr) in d.chunks_mut(c).zip(y.data().chunks(c)).zip(gd.chunks(c)) {
                    let dotp: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dotp);
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), d).expect("softmax grad"));
            }
            Op::Sum(x) => acc(*x, Tensor::full(val(*x).shape(), gd[0])),
            Op::Mean(x) => {
                let n = T::c(val(*x).numel() as f64);
                acc(*x, Tensor::full(val(*x).shape(), gd[0] / n));
            }
            Op::SumAxis1(x) => {
                let s = val(*x).shape();
                let (gn, n, d) = (s[0], s[1], s[2]);
                let mut out = vec![T::zero(); gn * n * d];
                for gi in 0..gn {
                    for ni in 0..n {
                        out[(gi * n + ni) * d..][..d].copy_from_slice(&gd[gi * d..(gi + 1) * d]);
                    }
                }
                acc(*x, Tensor::new(s.to_vec(), out).expect("sum_axis1 grad"));
            }
            Op::RowDiv { num, den, eps } => {
                let (nv, dv) = (val(*num), val(*den));
                let p = nv.last_dim();
                if needs(*num) {
                    let mut out = gd.to_vec();
                    for (row, &d) in out.chunks_mut(p).zip(dv.data()) {
                        let inv = T::one() / (d + *eps);
                        row.iter_mut().for_each(|v| *v *= inv);
                    }
                    acc(*num, Tensor::new(nv.shape().to_vec(), out).expect("row_div grad"));
                }
                if needs(*den) {
                    let out: Vec<T> = gd
                        .chunks(p)
                        .zip(nv.data().chunks(p))
                        .zip(dv.data())
                        .map(|((gr, nr), &d)| {
                            let s = d + *eps;
                            -gr.iter().zip(nr).map(|(&a, &b)| a * b).sum::<T>() / (s * s)
                        })
                        .collect();
                    acc(*den, Tensor::new(dv.shape().to_vec(), out).expect("row_div grad"));
                }
            }
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let c = val(*scale).numel();
                let sc = val(*scale).data();
                if needs(*x) {
                    let mut dx = vec![T::zero(); xhat.len()];
                    let inv_c = T::one() / T::c(c as f64);
                    for (r, ((dxr, xr), gr)) in dx.chunks_mut(c).zip(xhat.chunks(c)).zip(gd.chunks(c)).enumerate() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let dxh = gr[j] * sc[j];
                            m1 += dxh;
                            m2 += dxh * xr[j];
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        for j in 0..c {
                            dxr[j] = inv_std[r] * (gr[j] * sc[j] - m1 - xr[j] * m2);
                        }
                    }
                    acc(*x, Tensor::new(val(*x).shape().to_vec(), dx).expect("ln grad"));
                }
                affine_param_grads(gd, xhat, c, *scale, *shift, &mut acc, needs(*scale), needs(*shift), val);
            }
            Op::BatchNormTrain {
                x,
                alpha,
                beta,
                xhat,
                inv_std,
            } => {
                let c = val(*alpha).numel();
                let al = val(*alpha).data();
                if needs(*x) {
                    let rows = xhat.len() / c;
                    let inv_n = T::one() / T::c(rows as f64);
                    let mut m1 = vec![T::zero(); c];
                    let mut m2 = vec![T::zero(); c];
                    for (xr, gr) in xhat.chunks(c).zip(gd.chunks(c)) {
                        for j in 0..c {
                            let dxh = gr[j] * al[j];
                            m1[j] += dxh;
                            m2[j] += dxh * xr[j];
                        }
                    }
                    let mut dx = vec![T::zero(); xhat.len()];
                    for ((dxr, xr), gr) in dx.chunks_mut(c).zip(xhat.chunks(c)).zip(gd.chunks(c)) {
                        for j in 0..c {
                            dxr[j] = inv_std[j] * (gr[j] * al[j] - m1[j] * inv_n - xr[j] * m2[j] * inv_n);
                        }
                    }
                    acc(*x, Tensor::new(val(*x).shape().to_vec(), dx).expect("bn grad"));
                }
                affine_param_grads(gd, xhat, c, *alpha, *beta, &mut acc, needs(*alpha), needs(*beta), val);
            }
            Op::BatchNormEval {
                x,
                alpha,
                beta,
                xhat,
                inv_std,
            } => {
                let c = val(*alpha).numel();
                let al = val(*alpha).data();
                if needs(*x) {
                    let mut dx = gd.to_vec();
                    for row in dx.chunks_mut(c) {
                        for j in 0..c {
                            row[j] *= al[j] * inv_std[j];
                        }
                    }
                    acc(*x, Tensor::new(val(*x).shape().to_vec(), dx).expect("bn eval grad"));
                }
                affine_param_grads(gd, xhat, c, *alpha, *beta, &mut acc, needs(*alpha), needs(*beta), val);
            }
            Op::DwcTokens {
                x,
                kernel,
                batch,
                h,
                w,
            } => {
                let (xv, kv) = (val(*x), val(*kernel));
                let c = xv.shape()[1];
                let k = kv.shape()[1];
                let taps = ops::taps_major(kv.data(), c, k);
                let mut dx = vec![T::zero(); xv.numel()];
                let mut dtaps = vec![T::zero(); taps.len()];
                let n = h * w;
                for b in 0..*batch {
                    let span = b * n * c..(b + 1) * n * c;
                    ops::dwc_tokens_backward(
                        &xv.data()[span.clone()],
                        &taps,
                        &gd[span.clone()],
                        *h,
                        *w,
                        c,
                        k,
                        &mut dx[span],
                        &mut dtaps,
                    );
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), dx).expect("dwc grad"));
                if needs(*kernel) {
                    let dk = kernels::transpose(&dtaps, k * k, c);
                    acc(*kernel, Tensor::new(kv.shape().to_vec(), dk).expect("dwc kernel grad"));
                }
            }
            Op::SplitHeads { x, batch, heads } => {
                let s = node.value.shape();
                let out = merge_heads_raw(gd, *batch, *heads, s[1], s[2]);
                acc(*x, Tensor::new(val(*x).shape().to_vec(), out).expect("split grad"));
            }
            Op::MergeHeads { x, heads } => {
                let s = val(*x).shape();
                let (gn, n, d) = (s[0], s[1], s[2]);
                let batch = gn / heads;
                let c = heads * d;
                let mut out = vec![T::zero(); gd.len()];
                for b in 0..batch {
                    for hh in 0..*heads {
                        for i in 0..n {
                            out[((b * heads + hh) * n + i) * d..][..d]
                                .copy_from_slice(&gd[(b * n + i) * c + hh * d..][..d]);
                        }
                    }
                }
                acc(*x, Tensor::new(s.to_vec(), out).expect("merge grad"));
            }
            Op::MeanPool { x, batch } => {
                let s = val(*x).shape();
                let n = s[0] / batch;
                let c = s[1];
                let inv = T::one() / T::c(n as f64);
                let mut out = vec![T::zero(); s[0] * c];
                for b in 0..*batch {
                    for i in 0..n {
                        for j in 0..c {
                            out[(b * n + i) * c + j] = gd[b * c + j] * inv;
                        }
                    }
                }
                acc(*x, Tensor::new(s.to_vec(), out).expect("pool grad"));
            }
            Op::CrossEntropy { logits, target, probs } => {
                let s = val(*logits).shape();
                let scale = gd[0] / T::c(s[0] as f64);
                let d: Vec<T> = probs.iter().zip(target).map(|(&p, &q)| (p - q) * scale).collect();
                acc(*logits, Tensor::new(s.to_vec(), d).expect("ce grad"));
            }
        }
    }
}

fn accumulate<T: Float>(grads: &mut [Option<Tensor<T>>], v: Var, d: Tensor<T>, needed: bool) {
    if !needed {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(d.data()) {
                *e += *x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

fn col_sums<T: Float>(g: &[T], c: usize, shape: &[usize]) -> Tensor<T> {
    let mut out = vec![T::zero(); c];
    for row in g.chunks(c) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::new(shape.to_vec(), out).expect("col_sums")
}

#[allow(clippy::too_many_arguments)]
fn affine_param_grads<'a, T: Float>(
    g: &[T],
    xhat: &[T],
    c: usize,
    scale: Var,
    shift: Var,
    acc: &mut impl FnMut(Var, Tensor<T>),
    need_scale: bool,
    need_shift: bool,
    val: impl Fn(Var) -> &'a Tensor<T>,
) {
    if need_scale {
        let mut ds = vec![T::zero(); c];
        for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
            for j in 0..c {
                ds[j] += gr[j] * xr[j];
            }
        }
        acc(scale, Tensor::new(val(scale).shape().to_vec(), ds).expect("scale grad"));
    }
    if need_shift {
        acc(shift, col_sums(g, c, val(shift).shape()));
    }
}

fn normalize_cols<T: Float>(x: &[T], mean: &[T], inv_std: &[T]) -> Vec<T> {
    let c = mean.len();
    let mut out = x.to_vec();
    for row in out.chunks_mut(c) {
        for j in 0..c {
            row[j] = (row[j] - mean[j]) * inv_std[j];
        }
    }
    out
}

fn affine_rows<T: Float>(xhat: &[T], scale: &[T], shift: &[T], shape: &[usize]) -> Tensor<T> {
    let c = scale.len();
    let mut out = xhat.to_vec();
    for row in out.chunks_mut(c) {
        for j in 0..c {
            row[j] = row[j] * scale[j] + shift[j];
        }
    }
    Tensor::new(shape.to_vec(), out).expect("affine_rows")
}

pub(crate) fn merge_heads_raw<T: Float>(src: &[T], batch: usize, heads: usize, n: usize, d: usize) -> Vec<T> {
    let c = heads * d;
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        for hh in 0..heads {
            for i in 0..n {
                out[(b * n + i) * c + hh * d..][..d].copy_from_slice(&src[((b * heads + hh) * n + i) * d..][..d]);
            }
        }
    }
    out
}

/// Batched `op(a) · op(b)`; `None` on shape mismatch.
fn gemm_value<T: Float>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Option<Tensor<T>> {
    let (ga, ra, ca) = split_batch(a.shape())?;
    let (gb, rb, cb) = split_batch(b.shape())?;
    if ga != gb {
        return None;
    }
    let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
    let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
    if k != k2 {
        return None;
    }
    let mut out = vec![T::zero(); ga * m * n];
    for g in 0..ga {
        let asl = &a.data()[g * ra * ca..(g + 1) * ra * ca];
        let bsl = &b.data()[g * rb * cb..(g + 1) * rb * cb];
        let osl = &mut out[g * m * n..(g + 1) * m * n];
        let a_owned;
        let a_rows: &[T] = if ta {
            a_owned = kernels::transpose(asl, ra, ca);
            &a_owned
        } else {
            asl
        };
        if tb {
            kernels::matmul_nt(a_rows, bsl, osl, m, k, n);
        } else {
            kernels::matmul(a_rows, bsl, osl, m, k, n);
        }
    }
    let shape = if a.ndim() == 3 || b.ndim() == 3 {
        vec![ga, m, n]
    } else {
        vec![m, n]
    };
    Tensor::new(shape, out).ok()
}

fn split_batch(s: &[usize]) -> Option<(usize, usize, usize)> {
    match s {
        [r, c] => Some((1, *r, *c)),
        [g, r, c] => Some((*g, *r, *c)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(vec![2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(vec![2], &[1., -2.]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2., -4.]);
    }

    #[test]
    fn two_uses_accumulate() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(vec![2], &[3., 4.]).unwrap());
        let a = tape.scale(x, 2.0);
        let b = tape.scale(x, 5.0);
        let sum = tape.add(a, b).unwrap();
        let s = tape.sum(sum);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[7., 7.]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(vec![3], &[-1., 0., 2.]).unwrap());
        let r = tape.relu(x);
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0., 0., 1.]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(SlabError::NotScalar(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        let c = tape.constant(Tensor::ones(&[2]));
        let m = tape.mul(x, c).unwrap();
        let s = tape.sum(m);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert!(tape.grad(x).is_some());
    }

    #[test]
    fn split_merge_round_trip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[6, 4], |i| i as f64));
        let s = tape.split_heads(x, 2, 2).unwrap();
        assert_eq!(tape.shape(s), &[4, 3, 2]);
        let m = tape.merge_heads(s, 2).unwrap();
        assert_eq!(tape.value(m), tape.value(x));
    }
}
