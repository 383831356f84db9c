//! Forward kernels on [`Tensor`] values. No gradient recording happens here;
//! the tape in [`crate::autodiff`] calls into these for its forward pass.

use super::kernels;
use super::{ensure_rank, Float, Tensor};
use crate::error::{Result, SlabError};

pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_rank(a, 2, "matmul")?;
    ensure_rank(b, 2, "matmul")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, p) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(SlabError::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![T::zero(); m * p];
    kernels::matmul(a.data(), b.data(), &mut out, m, k, p);
    Tensor::new(vec![m, p], out)
}

/// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
pub fn matmul_nt<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_rank(a, 2, "matmul_nt")?;
    ensure_rank(b, 2, "matmul_nt")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (n, k2) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(SlabError::shape(
            "matmul_nt",
            format!("{:?} x {:?}ᵀ", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    kernels::matmul_nt(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

pub fn transpose<T: Float>(a: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_rank(a, 2, "transpose")?;
    let (r, c) = (a.shape()[0], a.shape()[1]);
    Tensor::new(vec![c, r], kernels::transpose(a.data(), r, c))
}

pub fn add<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "add", |x, y| x + y)
}

pub fn sub<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "sub", |x, y| x - y)
}

pub fn mul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "mul", |x, y| x * y)
}

pub fn scale<T: Float>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|x| x * s)
}

fn check_row_vec<T: Float>(x: &Tensor<T>, v: &Tensor<T>, op: &'static str) -> Result<()> {
    if v.numel() != x.last_dim() || x.ndim() == 0 {
        return Err(SlabError::shape(
            op,
            format!("row vector {:?} against {:?}", v.shape(), x.shape()),
        ));
    }
    Ok(())
}

/// `x[.., c] + v[c]`
pub fn add_row<T: Float>(x: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    check_row_vec(x, v, "add_row")?;
    let c = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        for (o, &b) in row.iter_mut().zip(v.data()) {
            *o += b;
        }
    }
    Ok(out)
}

/// `x[.., c] * v[c]`
pub fn mul_row<T: Float>(x: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    check_row_vec(x, v, "mul_row")?;
    let c = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        for (o, &a) in row.iter_mut().zip(v.data()) {
            *o *= a;
        }
    }
    Ok(out)
}

/// `x · w + b` for token rows `x: [n×c]`, `w: [c×d]`, optional `b: [d]`.
pub fn linear<T: Float>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let y = matmul(x, w)?;
    match b {
        Some(b) => add_row(&y, b),
        None => Ok(y),
    }
}

/// Elementwise `max(x, 0)`.
pub fn relu<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-form Gaussian error linear unit, evaluated through the identity
/// `(1 + tanh u)/2 = σ(2u)` so the loop needs one `exp` per element.
#[inline]
pub fn gelu_scalar<T: Float>(x: T) -> T {
    let u = T::c(GELU_K) * (x + T::c(GELU_C) * x * x * x);
    x / (T::one() + (T::c(-2.0) * u).fast_exp())
}

#[inline]
pub fn gelu_grad_scalar<T: Float>(x: T) -> T {
    let x2 = x * x;
    let u = T::c(GELU_K) * (x + T::c(GELU_C) * x2 * x);
    let s = T::one() / (T::one() + (T::c(-2.0) * u).fast_exp());
    let du = T::c(2.0 * GELU_K) * (T::one() + T::c(3.0 * GELU_C) * x2);
    s + x * s * (T::one() - s) * du
}

pub fn gelu<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

/// In-place stabilized softmax of one row.
#[inline]
pub fn softmax_row<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Softmax over the last axis with row-max subtraction.
pub fn softmax_lastdim<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let c = x.last_dim();
    if c > 0 {
        out.data_mut().chunks_mut(c).for_each(softmax_row);
    }
    out
}

/// Population mean and variance over `axes`. The result keeps the
/// non-reduced axes in order.
pub fn reduce_moments<T: Float>(x: &Tensor<T>, axes: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
    let shape = x.shape();
    for &a in axes {
        if a >= shape.len() {
            return Err(SlabError::shape(
                "reduce_moments",
                format!("axis {a} out of range for {shape:?}"),
            ));
        }
    }
    let reduced: usize = axes.iter().map(|&a| shape[a]).product();
    if reduced == 0 || x.numel() == 0 {
        return Err(SlabError::EmptyReduction);
    }
    let kept_shape: Vec<usize> = (0..shape.len())
        .filter(|a| !axes.contains(a))
        .map(|a| shape[a])
        .collect();
    let kept: usize = kept_shape.iter().product();

    // Map each flat index to its output slot.
    let mut slot = vec![0usize; x.numel()];
    let mut idx = vec![0usize; shape.len()];
    for s in slot.iter_mut() {
        let mut o = 0;
        for (a, &i) in idx.iter().enumerate() {
            if !axes.contains(&a) {
                o = o * shape[a] + i;
            }
        }
        *s = o;
        for a in (0..shape.len()).rev() {
            idx[a] += 1;
            if idx[a] < shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }

    let count = T::c(reduced as f64);
    let mut mean = vec![T::zero(); kept];
    for (&v, &s) in x.data().iter().zip(&slot) {
        mean[s] += v;
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![T::zero(); kept];
    for (&v, &s) in x.data().iter().zip(&slot) {
        let d = v - mean[s];
        var[s] += d * d;
    }
    var.iter_mut().for_each(|v| *v /= count);
    Ok((Tensor::new(kept_shape.clone(), mean)?, Tensor::new(kept_shape, var)?))
}

/// Per-column mean and population variance of a `[rows×c]` matrix.
pub fn column_moments<T: Float>(x: &[T], c: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / c;
    let count = T::c(rows as f64);
    let mut mean = vec![T::zero(); c];
    for row in x.chunks(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![T::zero(); c];
    for row in x.chunks(c) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

fn check_kernel<T: Float>(kernel: &Tensor<T>, channels: usize, op: &'static str) -> Result<usize> {
    ensure_rank(kernel, 3, op)?;
    let k = kernel.shape()[1];
    if kernel.shape()[2] != k {
        return Err(SlabError::InvalidKernel(format!(
            "kernel must be square, got {:?}",
            kernel.shape()
        )));
    }
    if k % 2 == 0 {
        return Err(SlabError::InvalidKernel(format!("kernel size {k} is even")));
    }
    if kernel.shape()[0] != channels {
        return Err(SlabError::shape(
            op,
            format!("kernel has {} channels, input has {channels}", kernel.shape()[0]),
        ));
    }
    Ok(k)
}

/// Kernel `[c×k×k]` rearranged tap-major to `[k·k × c]`.
pub fn taps_major<T: Float>(kernel: &[T], c: usize, k: usize) -> Vec<T> {
    kernels::transpose(kernel, c, k * k)
}

/// Depthwise same-padded cross-correlation in token layout.
/// `x` is `[h·w × c]` row-major, `taps` is `[k·k × c]`.
pub fn dwc_tokens_raw<T: Float>(x: &[T], taps: &[T], h: usize, w: usize, c: usize, k: usize, out: &mut [T]) {
    let r = (k / 2) as isize;
    out.iter_mut().for_each(|v| *v = T::zero());
    for i in 0..h as isize {
        for j in 0..w as isize {
            let o = &mut out[(i as usize * w + j as usize) * c..][..c];
            for u in 0..k as isize {
                let si = i + u - r;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for v in 0..k as isize {
                    let sj = j + v - r;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let src = &x[(si as usize * w + sj as usize) * c..][..c];
                    let tap = &taps[(u as usize * k + v as usize) * c..][..c];
                    for ((ov, &xv), &kv) in o.iter_mut().zip(src).zip(tap) {
                        *ov += kv * xv;
                    }
                }
            }
        }
    }
}

/// Gradients of [`dwc_tokens_raw`]: returns `(d_x, d_taps)`.
#[allow(clippy::too_many_arguments)]
pub fn dwc_tokens_backward<T: Float>(
    x: &[T],
    taps: &[T],
    grad: &[T],
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    d_x: &mut [T],
    d_taps: &mut [T],
) {
    let r = (k / 2) as isize;
    for i in 0..h as isize {
        for j in 0..w as isize {
            let g = &grad[(i as usize * w + j as usize) * c..][..c];
            for u in 0..k as isize {
                let si = i + u - r;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for v in 0..k as isize {
                    let sj = j + v - r;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let base = (si as usize * w + sj as usize) * c;
                    let t = (u as usize * k + v as usize) * c;
                    for ch in 0..c {
                        d_x[base + ch] += taps[t + ch] * g[ch];
                        d_taps[t + ch] += x[base + ch] * g[ch];
                    }
                }
            }
        }
    }
}

/// Depthwise convolution of tokens `x: [h·w × c]` with `kernel: [c×k×k]`.
pub fn depthwise_conv_tokens<T: Float>(x: &Tensor<T>, kernel: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    ensure_rank(x, 2, "depthwise_conv_tokens")?;
    let (n, c) = (x.shape()[0], x.shape()[1]);
    if n != h * w {
        return Err(SlabError::GridMismatch {
            height: h,
            width: w,
            tokens: n,
        });
    }
    let k = check_kernel(kernel, c, "depthwise_conv_tokens")?;
    let taps = taps_major(kernel.data(), c, k);
    let mut out = vec![T::zero(); n * c];
    dwc_tokens_raw(x.data(), &taps, h, w, c, k, &mut out);
    Tensor::new(vec![n, c], out)
}

/// Per-channel 2-D cross-correlation of `x: [c×h×w]` with `kernel: [c×k×k]`,
/// zero same-padding.
pub fn depthwise_conv2d<T: Float>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_rank(x, 3, "depthwise_conv2d")?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    check_kernel(kernel, c, "depthwise_conv2d")?;
    let tokens = Tensor::new(vec![h * w, c], kernels::transpose(x.data(), c, h * w))?;
    let y = depthwise_conv_tokens(&tokens, kernel, h, w)?;
    Tensor::new(vec![c, h, w], kernels::transpose(y.data(), h * w, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn gelu_matches_tanh_form() {
        let tanh_form = |x: f64| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh());
        for i in -400..=400 {
            let x = i as f64 * 0.025;
            let want = tanh_form(x);
            assert!((gelu_scalar(x) - want).abs() <= 1e-15 * (1.0 + want.abs()), "{x}");
            assert!((gelu_scalar(x as f32) as f64 - want).abs() <= 1e-6 * (1.0 + want.abs()), "{x}");
            let h = 1e-6;
            let fd = (tanh_form(x + h) - tanh_form(x - h)) / (2.0 * h);
            assert!((gelu_grad_scalar(x) - fd).abs() <= 1e-8, "{x}");
        }
        assert_eq!(gelu_scalar(-200.0f32), 0.0);
        assert_eq!(gelu_scalar(200.0f32), 200.0);
        assert_eq!(gelu_grad_scalar(-200.0f64), 0.0);
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        let m = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(matmul(&eye, &m).unwrap(), m);
        let col = t(&[2, 1], &[5., 6.]);
        assert_eq!(matmul(&m, &col).unwrap().data(), &[17., 39.]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(SlabError::ShapeMismatch { .. })));
    }

    #[test]
    fn moments_cases() {
        let (m, v) = reduce_moments(&Tensor::<f64>::full(&[3, 4], 7.0), &[0, 1]).unwrap();
        assert_eq!((m.item(), v.item()), (7.0, 0.0));
        let (m, v) = reduce_moments(&t(&[2], &[1., 3.]), &[0]).unwrap();
        assert_eq!((m.item(), v.item()), (2.0, 1.0));
        let empty = Tensor::<f64>::new(vec![0], vec![]).unwrap();
        assert!(matches!(reduce_moments(&empty, &[0]), Err(SlabError::EmptyReduction)));
    }

    #[test]
    fn moments_keep_unreduced_axes() {
        // [2, 2, 2]; reduce axes 0 and 2, keep axis 1.
        let x = t(&[2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]);
        let (m, v) = reduce_moments(&x, &[0, 2]).unwrap();
        assert_eq!(m.shape(), &[2]);
        assert_eq!(m.data(), &[3.5, 5.5]);
        // values {1,2,5,6}: mean 3.5, var (6.25+2.25+2.25+6.25)/4
        assert_eq!(v.data()[0], 4.25);
    }

    #[test]
    fn relu_and_softmax_cases() {
        assert_eq!(relu(&t(&[3], &[-1., 0., 2.])).data(), &[0., 0., 2.]);
        let s = softmax_lastdim(&t(&[3], &[4., 4., 4.]));
        for &p in s.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_lastdim(&t(&[2], &[0., 3f64.ln()]));
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
        let big = softmax_lastdim(&t(&[2], &[1000., 0.]));
        assert!(big.all_finite());
    }

    #[test]
    fn dwc_center_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::randn(&[3, 5, 4], 1.0, &mut rng);
        let mut k = Tensor::<f32>::zeros(&[3, 3, 3]);
        for c in 0..3 {
            k.data_mut()[c * 9 + 4] = 1.0;
        }
        assert!(depthwise_conv2d(&x, &k).unwrap().bit_eq(&x));
    }

    #[test]
    fn dwc_average_on_constant() {
        let x = Tensor::<f64>::full(&[1, 4, 4], 2.0);
        let k = Tensor::<f64>::full(&[1, 3, 3], 1.0 / 9.0);
        let y = depthwise_conv2d(&x, &k).unwrap();
        assert!((y.at(&[0, 1, 1]) - 2.0).abs() < 1e-12);
        assert!((y.at(&[0, 1, 2]) - 2.0).abs() < 1e-12);
        // corner sees 4 of 9 taps, edge sees 6
        assert!((y.at(&[0, 0, 0]) - 2.0 * 4.0 / 9.0).abs() < 1e-12);
        assert!((y.at(&[0, 0, 1]) - 2.0 * 6.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn dwc_rejects_bad_kernels() {
        let x = Tensor::<f64>::zeros(&[2, 4, 4]);
        assert!(matches!(
            depthwise_conv2d(&x, &Tensor::zeros(&[2, 2, 2])),
            Err(SlabError::InvalidKernel(_))
        ));
        assert!(matches!(
            depthwise_conv2d(&x, &Tensor::zeros(&[3, 3, 3])),
            Err(SlabError::ShapeMismatch { .. })
        ));
    }
}
