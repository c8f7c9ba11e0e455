//! Dense kernels shared by forward and backward passes.

use super::Real;
use crate::exec::{self, Execution};

/// Work (m·k·n) above which row blocks are fanned out.
const PAR_THRESHOLD: usize = 1 << 18;

/// Output rows per work unit; each `b` row is read once per block.
const ROW_BLOCK: usize = 4;

/// `out[m×n] += op(a) · op(b)` where `op` optionally transposes.
///
/// `a` is `[m×k]` (or `[k×m]` when `trans_a`), `b` is `[k×n]` (or `[n×k]`
/// when `trans_b`). Every output element sums over `p = 0..k` in ascending
/// order regardless of the execution path or blocking, so results are
/// bitwise stable.
#[allow(clippy::too_many_arguments)]
pub fn gemm_acc<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    out: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (at, bt);
    let a_rows: &[T] = if trans_a {
        at = transpose(a, k, m);
        &at
    } else {
        a
    };
    let b_rows: &[T] = if trans_b {
        bt = transpose(b, n, k);
        &bt
    } else {
        b
    };
    let block = |bi: usize, out: &mut [T]| {
        let i0 = bi * ROW_BLOCK;
        let rows = out.len() / n;
        let a_row = |r: usize| &a_rows[(i0 + r) * k..(i0 + r + 1) * k];
        if rows == ROW_BLOCK {
            tile::<T, ROW_BLOCK>([a_row(0), a_row(1), a_row(2), a_row(3)], b_rows, k, n, out);
        } else {
            for (r, orow) in out.chunks_exact_mut(n).enumerate() {
                tile::<T, 1>([a_row(r)], b_rows, k, n, orow);
            }
        }
    };
    let exec = if m * k * n >= PAR_THRESHOLD && m > ROW_BLOCK {
        Execution::Parallel
    } else {
        Execution::Sequential
    };
    exec::for_each_chunk_mut(exec, out, n * ROW_BLOCK, block);
}

/// Columns per register tile.
const COL_TILE: usize = 8;

/// `out[R×n] += a[R×k] · b[k×n]` with `R·COL_TILE` accumulators held across
/// the whole `p` loop. Each element still adds its products in ascending `p`.
fn tile<T: Real, const R: usize>(a: [&[T]; R], b: &[T], k: usize, n: usize, out: &mut [T]) {
    let full = n / COL_TILE * COL_TILE;
    for j0 in (0..full).step_by(COL_TILE) {
        let mut acc = [[T::zero(); COL_TILE]; R];
        for (r, row) in acc.iter_mut().enumerate() {
            row.copy_from_slice(&out[r * n + j0..r * n + j0 + COL_TILE]);
        }
        for p in 0..k {
            let bw: &[T; COL_TILE] = b[p * n + j0..p * n + j0 + COL_TILE].try_into().expect("tile width");
            for (row, ar) in acc.iter_mut().zip(&a) {
                let x = ar[p];
                for (o, &bv) in row.iter_mut().zip(bw) {
                    *o += x * bv;
                }
            }
        }
        for (r, row) in acc.iter().enumerate() {
            out[r * n + j0..r * n + j0 + COL_TILE].copy_from_slice(row);
        }
    }
    for j in full..n {
        for (r, ar) in a.iter().enumerate() {
            let mut s = out[r * n + j];
            for (p, &x) in ar.iter().enumerate() {
                s += x * b[p * n + j];
            }
            out[r * n + j] = s;
        }
    }
}

/// Transposes a row-major `[rows×cols]` matrix.
pub fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

pub fn gelu<T: Real>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::of(0.5);
    half * x * (T::one() + tanh_exp(c * (x + a * x * x * x)))
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::of(0.5);
    let three = T::of(3.0);
    let t = tanh_exp(c * (x + a * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// `tanh` through one `exp`; libm's tanh dominated MLP time. Saturates
/// cleanly since `exp` overflowing to inf yields exactly 1.
fn tanh_exp<T: Real>(u: T) -> T {
    let two = T::of(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

/// Tanh-approximation constants: `sqrt(2/pi)` and `0.044715`.
fn gelu_consts<T: Real>() -> (T, T) {
    (
        T::of((2.0 / std::f64::consts::PI).sqrt()),
        T::of(0.044715),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn transposed_variants_agree_with_naive() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);

        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, &a, false, &b, false, &mut out);
        assert_eq!(out, want);

        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        let mut out2 = vec![0.0; m * n];
        gemm_acc(m, k, n, &at, true, &bt, true, &mut out2);
        for (x, y) in out2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        // tanh form at x = 1: 0.5 * (1 + tanh(0.7978845608 * 1.044715))
        assert!((gelu(1.0f64) - 0.841_191_990_608_276_8).abs() < 1e-12);
    }

    #[test]
    fn exp_tanh_tracks_libm() {
        for i in -4000..=4000 {
            let u = i as f64 * 0.01;
            assert!((tanh_exp(u) - u.tanh()).abs() < 1e-15, "{u}");
            assert!((tanh_exp(u as f32) - (u as f32).tanh()).abs() < 2e-7, "{u}");
        }
        assert_eq!(tanh_exp(1e6f32), 1.0);
        assert_eq!(tanh_exp(-1e6f32), -1.0);
    }
}
