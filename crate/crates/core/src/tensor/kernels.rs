//! Slice-level compute kernels shared by the plain and recorded paths.
//!
//! Reductions use fixed lane accumulators so results do not depend on the
//! vector width the compiler picks.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use super::Float;

const LANES: usize = 8;

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Number of threads kernels may use. Defaults to 1.
pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

/// Cap kernel parallelism. Values above 1 route row loops through rayon.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

/// Reads `SLAB_THREADS`, applies it, and returns the effective count.
pub fn init_threads_from_env() -> usize {
    if let Some(n) = std::env::var("SLAB_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    {
        set_threads(n);
        if n > 1 {
            // A global pool may already exist; that only matters for its size.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    }
    threads()
}

#[inline]
pub fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    lane_sum(&acc) + tail
}

#[inline(always)]
fn lane_sum<T: Float>(acc: &[T; LANES]) -> T {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Float>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn for_rows<T: Float>(out: &mut [T], row_len: usize, rows_per_task: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    if row_len == 0 {
        return;
    }
    let chunk = row_len * rows_per_task;
    if threads() > 1 && out.len() > chunk {
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i * rows_per_task, c));
    } else {
        for (i, c) in out.chunks_mut(chunk).enumerate() {
            f(i * rows_per_task, c);
        }
    }
}

const MR: usize = 4;
const NR: usize = 32;

/// `c[m×p] = a[m×k] · b[k×p]`, overwriting `c`.
///
/// Every output accumulates over `k` in order, so neither the register
/// tiling nor threading changes the result.
pub fn matmul<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(c.len(), m * p);
    if k == 0 {
        c.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    for_rows(c, p, MR, |row0, block| matmul_rows(&a[row0 * k..], b, block, k, p));
}

/// Rows of `a` starting at its head times `b`, into `block` (whole rows).
// Out of line on purpose: inlined into the rayon closure the tile loop
// stops vectorizing.
#[inline(never)]
fn matmul_rows<T: Float>(a: &[T], b: &[T], block: &mut [T], k: usize, p: usize) {
    let rows = block.len() / p.max(1);
    // k-major panel of the rows, zero-padded to MR
    let mut panel = vec![T::zero(); k * MR];
    for r in 0..rows {
        for (kk, &x) in a[r * k..(r + 1) * k].iter().enumerate() {
            panel[kk * MR + r] = x;
        }
    }
    let mut j0 = 0;
    while j0 + NR <= p {
        tile::<T, NR>(&panel, b, p, j0, block, rows);
        j0 += NR;
    }
    if j0 + NR / 2 <= p {
        tile::<T, { NR / 2 }>(&panel, b, p, j0, block, rows);
        j0 += NR / 2;
    }
    if j0 + NR / 4 <= p {
        tile::<T, { NR / 4 }>(&panel, b, p, j0, block, rows);
        j0 += NR / 4;
    }
    if j0 < p {
        tile_edge(&panel, b, p, j0, block, rows);
    }
}

/// `MR×W` register tile over columns `[j0, j0 + W)`.
#[inline(always)]
fn tile<T: Float, const W: usize>(panel: &[T], b: &[T], p: usize, j0: usize, block: &mut [T], rows: usize) {
    let mut acc = [[T::zero(); W]; MR];
    for (xs, brow) in panel.chunks_exact(MR).zip(b.chunks_exact(p)) {
        let bv: &[T; W] = brow[j0..j0 + W].try_into().unwrap();
        let xs: &[T; MR] = xs.try_into().unwrap();
        for r in 0..MR {
            let x = xs[r];
            let accr = &mut acc[r];
            for j in 0..W {
                accr[j] += x * bv[j];
            }
        }
    }
    for r in 0..rows {
        block[r * p + j0..r * p + j0 + W].copy_from_slice(&acc[r]);
    }
}

fn tile_edge<T: Float>(panel: &[T], b: &[T], p: usize, j0: usize, block: &mut [T], rows: usize) {
    let w = p - j0;
    for r in 0..rows {
        let out = &mut block[r * p + j0..r * p + p];
        out.iter_mut().for_each(|v| *v = T::zero());
        for (xs, brow) in panel.chunks_exact(MR).zip(b.chunks_exact(p)) {
            let x = xs[r];
            for (s, &y) in out.iter_mut().zip(&brow[j0..j0 + w]) {
                *s += x * y;
            }
        }
    }
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`, overwriting `c`.
pub fn matmul_nt<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(b.len(), n * k);
    let bt = transpose(b, n, k);
    matmul(a, &bt, c, m, k, n);
}

/// `c[k×p] = a[m×k]ᵀ · b[m×p]`, overwriting `c`.
pub fn matmul_tn<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), m * k);
    let at = transpose(a, m, k);
    matmul(&at, b, c, k, m, p);
}

/// Row-major transpose of an `r×c` matrix.
pub fn transpose<T: Float>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Copies columns `[col0, col0 + width)` of a `rows×stride` matrix.
pub fn gather_cols<T: Float>(a: &[T], rows: usize, stride: usize, col0: usize, width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * width);
    for i in 0..rows {
        out.extend_from_slice(&a[i * stride + col0..i * stride + col0 + width]);
    }
    out
}

/// Writes a `rows×width` block into columns `[col0, col0 + width)`.
pub fn scatter_cols<T: Float>(src: &[T], dst: &mut [T], rows: usize, stride: usize, col0: usize, width: usize) {
    for i in 0..rows {
        dst[i * stride + col0..i * stride + col0 + width].copy_from_slice(&src[i * width..(i + 1) * width]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * p];
        for i in 0..m {
            for j in 0..p {
                for kk in 0..k {
                    c[i * p + j] += a[i * k + kk] * b[kk * p + j];
                }
            }
        }
        c
    }

    #[test]
    fn kernels_agree_with_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, k, p) in &[(1, 1, 1), (3, 5, 2), (9, 17, 13), (4, 8, 8), (6, 33, 5), (8, 7, 64), (5, 3, 70), (7, 16, 16), (9, 11, 29), (4, 5, 56)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let want = naive(&a, &b, m, k, p);

            let mut c = vec![0.0; m * p];
            matmul(&a, &b, &mut c, m, k, p);
            let bt = transpose(&b, k, p);
            let mut c_nt = vec![0.0; m * p];
            matmul_nt(&a, &bt, &mut c_nt, m, k, p);
            let at = transpose(&a, m, k);
            let mut c_tn = vec![0.0; m * p];
            matmul_tn(&at, &b, &mut c_tn, k, m, p);
            for i in 0..m * p {
                assert!((c[i] - want[i]).abs() < 1e-12);
                assert!((c_nt[i] - want[i]).abs() < 1e-12);
                assert!((c_tn[i] - want[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn threaded_rows_match_serial() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (m, k, p) = (37, 19, 23);
        let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..k * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut serial = vec![0.0; m * p];
        matmul(&a, &b, &mut serial, m, k, p);
        set_threads(3);
        let mut par = vec![0.0; m * p];
        matmul(&a, &b, &mut par, m, k, p);
        set_threads(1);
        assert_eq!(serial, par);
    }
}
