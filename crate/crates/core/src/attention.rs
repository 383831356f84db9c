//! Softmax attention and simplified linear attention (SLA).
//!
//! SLA replaces `exp(q·k/√d)` with `ReLU(q)·ReLU(k)` and computes
//! `ReLU(K)ᵀV` before touching the queries, so each head costs `O(N·d²)`
//! instead of `O(N²·d)`. A depthwise convolution of `V` over the token grid
//! is added to the normalized attention output.
//!
//! Queries, keys and values are `[N × C]` with head `h` occupying columns
//! `h·d .. (h+1)·d`, `d = C / heads`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SlabError};
use crate::tensor::kernels;
use crate::tensor::ops;
use crate::tensor::{Float, Tensor};

pub const DEFAULT_EPS_DENOM: f64 = 1e-6;
pub const DEFAULT_DWC_KERNEL: usize = 3;

/// Spatial layout of the token sequence for the depthwise branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    /// A 1-D sequence: one row of `n` tokens.
    pub fn sequence(n: usize) -> Self {
        Self { height: 1, width: n }
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn check(&self, n: usize) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.tokens() != n {
            return Err(SlabError::GridMismatch {
                height: self.height,
                width: self.width,
                tokens: n,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub dwc_kernel: Tensor<T>,
    pub heads: usize,
    pub eps_denom: f64,
    /// Present only after a normalization has been folded into the QKV
    /// projection.
    pub qkv_bias: Option<[Tensor<T>; 3]>,
}

impl<T: Float> AttentionParams<T> {
    /// Random init: projections `N(0, 1/C)`, DWC taps `N(0, 0.02²)`.
    pub fn init<R: Rng + ?Sized>(dim: usize, heads: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(SlabError::shape(
                "AttentionParams::init",
                format!("dim {dim} not divisible by {heads} heads"),
            ));
        }
        if kernel % 2 == 0 {
            return Err(SlabError::InvalidKernel(format!("kernel size {kernel} is even")));
        }
        let std = 1.0 / (dim as f64).sqrt();
        Ok(Self {
            w_q: Tensor::randn(&[dim, dim], std, rng),
            w_k: Tensor::randn(&[dim, dim], std, rng),
            w_v: Tensor::randn(&[dim, dim], std, rng),
            w_o: Tensor::randn(&[dim, dim], std, rng),
            dwc_kernel: Tensor::randn(&[dim, kernel, kernel], 0.02, rng),
            heads,
            eps_denom: DEFAULT_EPS_DENOM,
            qkv_bias: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn kernel_size(&self) -> usize {
        self.dwc_kernel.shape()[1]
    }

    fn check_input(&self, x: &Tensor<T>, op: &'static str) -> Result<()> {
        let c = self.dim();
        if x.ndim() != 2 || x.shape()[1] != c {
            return Err(SlabError::shape(op, format!("input {:?} against dim {c}", x.shape())));
        }
        if self.heads == 0 || c % self.heads != 0 {
            return Err(SlabError::shape(op, format!("dim {c} not divisible by {} heads", self.heads)));
        }
        Ok(())
    }

    /// `(Q, K, V)`, each `[N × C]`.
    pub fn project(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let bias = |i: usize| self.qkv_bias.as_ref().map(|b| &b[i]);
        Ok((
            ops::linear(x, &self.w_q, bias(0))?,
            ops::linear(x, &self.w_k, bias(1))?,
            ops::linear(x, &self.w_v, bias(2))?,
        ))
    }
}

/// Head `h` of a `[N × C]` matrix as a contiguous `[N × d]` block.
fn head<T: Float>(m: &Tensor<T>, h: usize, d: usize) -> Vec<T> {
    kernels::gather_cols(m.data(), m.shape()[0], m.shape()[1], h * d, d)
}

const QUERY_BLOCK: usize = 32;

/// Multi-head `softmax(QKᵀ/√d)·V` without projections. Rows are processed in
/// blocks so the `N × N` score matrix is never materialized.
pub fn softmax_attention_core<T: Float>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    check_qkv(q, k, v, heads, "softmax_attention")?;
    let (n, c) = (q.shape()[0], q.shape()[1]);
    let d = c / heads;
    let scale = T::one() / T::c(d as f64).sqrt();
    let mut out = vec![T::zero(); n * c];
    let mut scores = vec![T::zero(); QUERY_BLOCK * n];
    let mut mixed = vec![T::zero(); QUERY_BLOCK * d];
    for h in 0..heads {
        let qh = head(q, h, d);
        let kt = kernels::transpose(&head(k, h, d), n, d);
        let vh = head(v, h, d);
        for i0 in (0..n).step_by(QUERY_BLOCK) {
            let rows = QUERY_BLOCK.min(n - i0);
            let s = &mut scores[..rows * n];
            kernels::matmul(&qh[i0 * d..(i0 + rows) * d], &kt, s, rows, d, n);
            for row in s.chunks_mut(n) {
                row.iter_mut().for_each(|x| *x *= scale);
                ops::softmax_row(row);
            }
            let o = &mut mixed[..rows * d];
            kernels::matmul(s, &vh, o, rows, n, d);
            for r in 0..rows {
                out[(i0 + r) * c + h * d..][..d].copy_from_slice(&o[r * d..(r + 1) * d]);
            }
        }
    }
    Tensor::new(vec![n, c], out)
}

fn check_qkv<T: Float>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize, op: &'static str) -> Result<()> {
    if q.ndim() != 2 || q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(SlabError::shape(
            op,
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if heads == 0 || q.shape()[1] % heads != 0 {
        return Err(SlabError::shape(op, format!("{} channels, {heads} heads", q.shape()[1])));
    }
    Ok(())
}

/// Full softmax attention block: projections, per-head softmax attention,
/// output projection.
pub fn softmax_attention<T: Float>(x: &Tensor<T>, p: &AttentionParams<T>) -> Result<Tensor<T>> {
    p.check_input(x, "softmax_attention")?;
    let (q, k, v) = p.project(x)?;
    let o = softmax_attention_core(&q, &k, &v, p.heads)?;
    ops::matmul(&o, &p.w_o)
}

/// Per-head normalized linear attention `Õ` (no DWC), in `KᵀV`-first order.
pub fn sla_attention_branch<T: Float>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize, eps: f64) -> Result<Tensor<T>> {
    check_qkv(q, k, v, heads, "sla_attention")?;
    let (n, c) = (q.shape()[0], q.shape()[1]);
    let d = c / heads;
    let eps = T::c(eps);
    let relu = |xs: &mut [T]| xs.iter_mut().for_each(|x| *x = x.max(T::zero()));
    let mut out = vec![T::zero(); n * c];
    let mut kv = vec![T::zero(); d * d];
    let mut num = vec![T::zero(); n * d];
    for h in 0..heads {
        let mut qh = head(q, h, d);
        let mut kh = head(k, h, d);
        let vh = head(v, h, d);
        relu(&mut qh);
        relu(&mut kh);
        kernels::matmul_tn(&kh, &vh, &mut kv, n, d, d);
        let mut ksum = vec![T::zero(); d];
        for row in kh.chunks(d) {
            for (s, &x) in ksum.iter_mut().zip(row) {
                *s += x;
            }
        }
        kernels::matmul(&qh, &kv, &mut num, n, d, d);
        for i in 0..n {
            let den = kernels::dot(&qh[i * d..(i + 1) * d], &ksum);
            let inv = T::one() / (den + eps);
            let dst = &mut out[i * c + h * d..][..d];
            for (o, &nv) in dst.iter_mut().zip(&num[i * d..(i + 1) * d]) {
                *o = nv * inv;
            }
        }
    }
    Tensor::new(vec![n, c], out)
}

/// `Õ + DWC(V)` without projections.
pub fn sla_attention_core<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    kernel: &Tensor<T>,
    grid: TokenGrid,
    eps: f64,
) -> Result<Tensor<T>> {
    grid.check(q.shape().first().copied().unwrap_or(0))?;
    let mut o = sla_attention_branch(q, k, v, heads, eps)?;
    let local = ops::depthwise_conv_tokens(v, kernel, grid.height, grid.width)?;
    for (a, &b) in o.data_mut().iter_mut().zip(local.data()) {
        *a += b;
    }
    Ok(o)
}

/// Full SLA block: projections, linear attention plus DWC(V), output
/// projection.
pub fn sla_attention<T: Float>(x: &Tensor<T>, p: &AttentionParams<T>, grid: TokenGrid) -> Result<Tensor<T>> {
    p.check_input(x, "sla_attention")?;
    grid.check(x.shape()[0])?;
    let (q, k, v) = p.project(x)?;
    let o = sla_attention_core(&q, &k, &v, p.heads, &p.dwc_kernel, grid, p.eps_denom)?;
    ops::matmul(&o, &p.w_o)
}

/// SLA evaluated in the explicit quadratic order with plain loops: builds
/// the full `ReLU(Q)ReLU(K)ᵀ` matrix per head, row-normalizes it, mixes `V`,
/// then adds a directly evaluated depthwise convolution. Shares no kernels
/// with [`sla_attention`]; it exists to check it.
pub fn sla_naive_oracle<T: Float>(x: &Tensor<T>, p: &AttentionParams<T>, grid: TokenGrid) -> Result<Tensor<T>> {
    p.check_input(x, "sla_naive_oracle")?;
    grid.check(x.shape()[0])?;
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let d = c / p.heads;
    let proj = |w: &Tensor<T>, bias: Option<&Tensor<T>>| {
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            for j in 0..c {
                let mut s = bias.map_or(T::zero(), |b| b.data()[j]);
                for t in 0..c {
                    s += x.data()[i * c + t] * w.data()[t * c + j];
                }
                out[i * c + j] = s;
            }
        }
        out
    };
    let bias = |i: usize| p.qkv_bias.as_ref().map(|b| &b[i]);
    let q = proj(&p.w_q, bias(0));
    let k = proj(&p.w_k, bias(1));
    let v = proj(&p.w_v, bias(2));
    let eps = T::c(p.eps_denom);
    let relu = |a: T| a.max(T::zero());

    let mut o = vec![T::zero(); n * c];
    let mut sim = vec![T::zero(); n * n];
    for h in 0..p.heads {
        for i in 0..n {
            for j in 0..n {
                let mut s = T::zero();
                for t in h * d..(h + 1) * d {
                    s += relu(q[i * c + t]) * relu(k[j * c + t]);
                }
                sim[i * n + j] = s;
            }
        }
        for i in 0..n {
            let row_sum: T = sim[i * n..(i + 1) * n].iter().copied().sum();
            for t in h * d..(h + 1) * d {
                let mut acc = T::zero();
                for j in 0..n {
                    acc += sim[i * n + j] / (row_sum + eps) * v[j * c + t];
                }
                o[i * c + t] = acc;
            }
        }
    }

    let kk = p.kernel_size();
    let r = (kk / 2) as isize;
    let (gh, gw) = (grid.height as isize, grid.width as isize);
    for ch in 0..c {
        for yi in 0..gh {
            for xi in 0..gw {
                let mut acc = T::zero();
                for u in 0..kk as isize {
                    for w in 0..kk as isize {
                        let (sy, sx) = (yi + u - r, xi + w - r);
                        if sy >= 0 && sy < gh && sx >= 0 && sx < gw {
                            let tap = p.dwc_kernel.data()[(ch * kk + u as usize) * kk + w as usize];
                            acc += tap * v[(sy * gw + sx) as usize * c + ch];
                        }
                    }
                }
                o[(yi * gw + xi) as usize * c + ch] += acc;
            }
        }
    }

    let mut out = vec![T::zero(); n * c];
    for i in 0..n {
        for j in 0..c {
            let mut s = T::zero();
            for t in 0..c {
                s += o[i * c + t] * p.w_o.data()[t * c + j];
            }
            out[i * c + j] = s;
        }
    }
    Tensor::new(vec![n, c], out)
}

/// Unnormalized SLA similarity `ReLU(Q_h)ReLU(K_h)ᵀ` of one head, `[N × N]`.
pub fn sla_similarity<T: Float>(x: &Tensor<T>, p: &AttentionParams<T>, head_index: usize) -> Result<Tensor<T>> {
    p.check_input(x, "sla_similarity")?;
    let (q, k, _) = p.project(x)?;
    let d = p.head_dim();
    let qh = Tensor::new(vec![x.shape()[0], d], head(&q, head_index, d))?;
    let kh = Tensor::new(vec![x.shape()[0], d], head(&k, head_index, d))?;
    ops::matmul_nt(&ops::relu(&qh), &ops::relu(&kh))
}

/// Softmax attention map `softmax(Q_h K_hᵀ/√d)` of one head, `[N × N]`.
pub fn softmax_attention_map<T: Float>(x: &Tensor<T>, p: &AttentionParams<T>, head_index: usize) -> Result<Tensor<T>> {
    p.check_input(x, "softmax_attention_map")?;
    let (q, k, _) = p.project(x)?;
    let d = p.head_dim();
    let qh = Tensor::new(vec![x.shape()[0], d], head(&q, head_index, d))?;
    let kh = Tensor::new(vec![x.shape()[0], d], head(&k, head_index, d))?;
    let s = ops::scale(&ops::matmul_nt(&qh, &kh)?, T::one() / T::c(d as f64).sqrt());
    Ok(ops::softmax_lastdim(&s))
}

/// Singular values of a square matrix, descending, by one-sided Jacobi
/// rotations in 64-bit.
pub fn singular_values<T: Float>(m: &Tensor<T>) -> Result<Vec<f64>> {
    if m.ndim() != 2 || m.shape()[0] != m.shape()[1] {
        return Err(SlabError::shape("singular_values", format!("{:?}", m.shape())));
    }
    let n = m.shape()[0];
    // Columns of A stored contiguously.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| m.data()[i * n + j].f64()).collect()).collect();
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (a, b) = (&cols[p], &cols[q]);
                    let alpha: f64 = a.iter().map(|x| x * x).sum();
                    let beta: f64 = b.iter().map(|x| x * x).sum();
                    let gamma: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                let (left, right) = cols.split_at_mut(q);
                let (a, b) = (&mut left[p], &mut right[0]);
                for (x, y) in a.iter_mut().zip(b.iter_mut()) {
                    let (xa, yb) = (*x, *y);
                    *x = cs * xa - sn * yb;
                    *y = sn * xa + cs * yb;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    Ok(sv)
}

/// Number of singular values above `tol` times the largest one.
pub fn attention_map_rank<T: Float>(sim: &Tensor<T>, tol: f64) -> Result<usize> {
    let sv = singular_values(sim)?;
    let Some(&top) = sv.first() else { return Ok(0) };
    if top == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > tol * top).count())
}

/// Attention parameters bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub dwc_kernel: Var,
    pub qkv_bias: Option<[Var; 3]>,
    pub heads: usize,
}

fn project_tape<T: Float>(tape: &mut Tape<T>, x: Var, p: &AttentionVars) -> Result<(Var, Var, Var)> {
    let bias = |i: usize| p.qkv_bias.map(|b| b[i]);
    Ok((
        tape.linear(x, p.w_q, bias(0))?,
        tape.linear(x, p.w_k, bias(1))?,
        tape.linear(x, p.w_v, bias(2))?,
    ))
}

/// Recorded softmax attention over `batch` stacked sequences `[batch·N × C]`.
pub fn softmax_attention_tape<T: Float>(tape: &mut Tape<T>, x: Var, p: &AttentionVars, batch: usize) -> Result<Var> {
    let (q, k, v) = project_tape(tape, x, p)?;
    let (qh, kh, vh) = (
        tape.split_heads(q, batch, p.heads)?,
        tape.split_heads(k, batch, p.heads)?,
        tape.split_heads(v, batch, p.heads)?,
    );
    let d = tape.shape(qh)[2];
    let s = tape.matmul_t(qh, false, kh, true)?;
    let s = tape.scale(s, T::one() / T::c(d as f64).sqrt());
    let a = tape.softmax_lastdim(s);
    let o = tape.matmul(a, vh)?;
    let o = tape.merge_heads(o, p.heads)?;
    tape.matmul(o, p.w_o)
}

/// Recorded SLA in `KᵀV`-first order plus the DWC branch.
pub fn sla_attention_tape<T: Float>(
    tape: &mut Tape<T>,
    x: Var,
    p: &AttentionVars,
    batch: usize,
    grid: TokenGrid,
    eps: f64,
) -> Result<Var> {
    let (q, k, v) = project_tape(tape, x, p)?;
    let (qh, kh, vh) = (
        tape.split_heads(q, batch, p.heads)?,
        tape.split_heads(k, batch, p.heads)?,
        tape.split_heads(v, batch, p.heads)?,
    );
    let rq = tape.relu(qh);
    let rk = tape.relu(kh);
    let kv = tape.matmul_t(rk, true, vh, false)?;
    let num = tape.matmul(rq, kv)?;
    let ksum = tape.sum_axis1(rk)?;
    let den = tape.matmul_t(rq, false, ksum, true)?;
    let o = tape.row_div(num, den, T::c(eps))?;
    let o = tape.merge_heads(o, p.heads)?;
    let local = tape.dwc_tokens(v, p.dwc_kernel, batch, grid.height, grid.width)?;
    let o = tape.add(o, local)?;
    tape.matmul(o, p.w_o)
}

/// Recorded SLA in the quadratic order (full similarity matrix).
pub fn sla_naive_tape<T: Float>(
    tape: &mut Tape<T>,
    x: Var,
    p: &AttentionVars,
    batch: usize,
    grid: TokenGrid,
    eps: f64,
) -> Result<Var> {
    let (q, k, v) = project_tape(tape, x, p)?;
    let (qh, kh, vh) = (
        tape.split_heads(q, batch, p.heads)?,
        tape.split_heads(k, batch, p.heads)?,
        tape.split_heads(v, batch, p.heads)?,
    );
    let rq = tape.relu(qh);
    let rk = tape.relu(kh);
    let sim = tape.matmul_t(rq, false, rk, true)?;
    let n = tape.shape(sim)[2];
    let ones = tape.constant(Tensor::ones(&[tape.shape(sim)[0], n, 1]));
    let den = tape.matmul(sim, ones)?;
    let a = tape.row_div(sim, den, T::c(eps))?;
    let o = tape.matmul(a, vh)?;
    let o = tape.merge_heads(o, p.heads)?;
    let local = tape.dwc_tokens(v, p.dwc_kernel, batch, grid.height, grid.width)?;
    let o = tape.add(o, local)?;
    tape.matmul(o, p.w_o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    fn identity_params(c: usize, heads: usize) -> AttentionParams<f64> {
        let eye = Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
        AttentionParams {
            w_q: eye.clone(),
            w_k: eye.clone(),
            w_v: eye.clone(),
            w_o: eye,
            dwc_kernel: Tensor::zeros(&[c, 3, 3]),
            heads,
            eps_denom: DEFAULT_EPS_DENOM,
            qkv_bias: None,
        }
    }

    #[test]
    fn softmax_identical_keys_give_mean_of_values() {
        let q = t(&[3, 2], &[1., 0., -2., 5., 0.3, 0.3]);
        let k = t(&[3, 2], &[0.5, 0.5, 0.5, 0.5, 0.5, 0.5]);
        let v = t(&[3, 2], &[1., 2., 3., 4., 5., 9.]);
        let o = softmax_attention_core(&q, &k, &v, 1).unwrap();
        for i in 0..3 {
            assert!((o.at(&[i, 0]) - 3.0).abs() < 1e-12);
            assert!((o.at(&[i, 1]) - 5.0).abs() < 1e-12);
        }
        let one = t(&[1, 2], &[0.7, -0.1]);
        let v1 = t(&[1, 2], &[4., -6.]);
        assert_eq!(softmax_attention_core(&one, &one, &v1, 1).unwrap(), v1);
    }

    #[test]
    fn softmax_matches_hand_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng);
        let p = AttentionParams::<f64>::init(2, 1, 3, &mut rng).unwrap();
        let y = softmax_attention(&x, &p).unwrap();
        // Direct evaluation with explicit exp-normalization and √C scaling.
        let (q, k, v) = p.project(&x).unwrap();
        let mut o = [[0.0; 2]; 4];
        for i in 0..4 {
            let w: Vec<f64> = (0..4)
                .map(|j| ((q.at(&[i, 0]) * k.at(&[j, 0]) + q.at(&[i, 1]) * k.at(&[j, 1])) / 2f64.sqrt()).exp())
                .collect();
            let z: f64 = w.iter().sum();
            for c in 0..2 {
                o[i][c] = (0..4).map(|j| w[j] / z * v.at(&[j, c])).sum();
            }
        }
        for i in 0..4 {
            for c in 0..2 {
                let want = o[i][0] * p.w_o.at(&[0, c]) + o[i][1] * p.w_o.at(&[1, c]);
                assert!((y.at(&[i, c]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sla_hand_case_with_dead_row() {
        let q = t(&[2, 1], &[1., -1.]);
        let k = t(&[2, 1], &[2., -3.]);
        let v = t(&[2, 1], &[10., 20.]);
        let o = sla_attention_core(&q, &k, &v, 1, &Tensor::zeros(&[1, 3, 3]), TokenGrid::sequence(2), DEFAULT_EPS_DENOM).unwrap();
        assert!((o.data()[0] - 10.0).abs() < 1e-5);
        assert_eq!(o.data()[1], 0.0);
    }

    #[test]
    fn sla_identity_dwc_with_dead_attention_passes_v() {
        let mut p = identity_params(2, 1);
        p.w_q = Tensor::zeros(&[2, 2]);
        p.w_k = Tensor::zeros(&[2, 2]);
        for c in 0..2 {
            p.dwc_kernel.data_mut()[c * 9 + 4] = 1.0;
        }
        let x = t(&[4, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]);
        let y = sla_attention(&x, &p, TokenGrid::new(2, 2)).unwrap();
        assert_eq!(y, x);
        assert_eq!(sla_naive_oracle(&x, &p, TokenGrid::new(2, 2)).unwrap(), x);
    }

    #[test]
    fn sla_single_key_column_hand_case() {
        // Only column 0 of K is nonzero, so sim_ij = q_i0 · k_j0.
        let q = t(&[3, 2], &[1., 2., 3., 0., 0., 4.]);
        let k = t(&[3, 2], &[2., 0., 1., 0., 0., 0.]);
        let v = t(&[3, 2], &[1., 0., 0., 1., 5., 5.]);
        let o = sla_attention_branch(&q, &k, &v, 1, DEFAULT_EPS_DENOM).unwrap();
        // rows 0 and 1: weights [2/3, 1/3, 0]; row 2 is dead.
        for i in 0..2 {
            assert!((o.at(&[i, 0]) - 2.0 / 3.0).abs() < 1e-6);
            assert!((o.at(&[i, 1]) - 1.0 / 3.0).abs() < 1e-6);
        }
        assert_eq!(&o.data()[4..6], &[0., 0.]);
    }

    #[test]
    fn sla_orders_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for &(n, gh, c, heads) in &[(16, 4, 4, 1), (12, 3, 8, 2), (9, 1, 6, 3)] {
            let x = Tensor::<f64>::randn(&[n, c], 1.0, &mut rng);
            let p = AttentionParams::<f64>::init(c, heads, 3, &mut rng).unwrap();
            let grid = TokenGrid::new(gh, n / gh);
            let fast = sla_attention(&x, &p, grid).unwrap();
            let slow = sla_naive_oracle(&x, &p, grid).unwrap();
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn zero_queries_kill_attention_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = AttentionParams::<f64>::init(4, 2, 3, &mut rng).unwrap();
        p.w_q = Tensor::zeros(&[4, 4]);
        p.dwc_kernel = Tensor::zeros(&[4, 3, 3]);
        let x = Tensor::<f64>::randn(&[6, 4], 1.0, &mut rng);
        let y = sla_naive_oracle(&x, &p, TokenGrid::new(2, 3)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grid_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = AttentionParams::<f64>::init(4, 1, 3, &mut rng).unwrap();
        let x = Tensor::<f64>::zeros(&[6, 4]);
        assert!(matches!(
            sla_attention(&x, &p, TokenGrid::new(2, 2)),
            Err(SlabError::GridMismatch { .. })
        ));
        assert!(matches!(
            softmax_attention(&Tensor::<f64>::zeros(&[6, 3]), &p),
            Err(SlabError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn rank_of_identity_and_outer_product() {
        let eye = Tensor::<f64>::from_fn(&[8, 8], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 });
        assert_eq!(attention_map_rank(&eye, 1e-10).unwrap(), 8);
        let u = [1.0, -2.0, 0.5, 3.0, 1.5];
        let v = [0.3, 0.1, -0.7, 2.0, 1.0];
        let outer = Tensor::<f64>::from_fn(&[5, 5], |i| u[i / 5] * v[i % 5]);
        assert_eq!(attention_map_rank(&outer, 1e-10).unwrap(), 1);
        assert_eq!(attention_map_rank(&Tensor::<f64>::zeros(&[3, 3]), 1e-10).unwrap(), 0);
    }

    #[test]
    fn tape_paths_match_plain_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let (batch, n, c, heads) = (2, 6, 4, 2);
        let grid = TokenGrid::new(2, 3);
        let x = Tensor::<f64>::randn(&[batch * n, c], 1.0, &mut rng);
        let p = AttentionParams::<f64>::init(c, heads, 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = AttentionVars {
            w_q: tape.leaf(p.w_q.clone()),
            w_k: tape.leaf(p.w_k.clone()),
            w_v: tape.leaf(p.w_v.clone()),
            w_o: tape.leaf(p.w_o.clone()),
            dwc_kernel: tape.leaf(p.dwc_kernel.clone()),
            qkv_bias: None,
            heads,
        };
        let sm = softmax_attention_tape(&mut tape, xv, &vars, batch).unwrap();
        let sla = sla_attention_tape(&mut tape, xv, &vars, batch, grid, p.eps_denom).unwrap();
        let naive = sla_naive_tape(&mut tape, xv, &vars, batch, grid, p.eps_denom).unwrap();
        for b in 0..batch {
            let xb = Tensor::new(vec![n, c], x.data()[b * n * c..(b + 1) * n * c].to_vec()).unwrap();
            let slice = |v: Var| Tensor::new(vec![n, c], tape.value(v).data()[b * n * c..(b + 1) * n * c].to_vec()).unwrap();
            assert!(slice(sm).max_abs_diff(&softmax_attention(&xb, &p).unwrap()) < 1e-12);
            assert!(slice(sla).max_abs_diff(&sla_attention(&xb, &p, grid).unwrap()) < 1e-12);
            assert!(slice(naive).max_abs_diff(&sla_attention(&xb, &p, grid).unwrap()) < 1e-12);
        }
    }
}
