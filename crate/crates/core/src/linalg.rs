//! Deterministic blocked linear algebra for the closed-form output layer.
//!
//! Everything here is bit-reproducible across worker counts: work is split
//! into fixed-size blocks, each block is produced by exactly one task, and
//! every accumulation inside a block runs in a fixed order on one thread.
//! Features are stored as f32 but all contractions run in f64; panels are
//! widened per block so no full f64 copy of the feature matrix ever exists.

use crate::error::{Error, Result};
use ndarray::{linalg::general_mat_mul, s, Array2, ArrayView2, ArrayViewMut2, Axis, Zip};
use rayon::prelude::*;

/// Result/panel block edge. All public entry points use this size, which is
/// part of the reproducibility contract.
pub const BLOCK: usize = 256;

fn widen(a: ArrayView2<f32>) -> Array2<f64> {
    a.mapv(f64::from)
}

/// `A * A^T` in f64 for an f32 `A`, shape `(rows, rows)`.
pub fn gram_rows(a: ArrayView2<f32>) -> Array2<f64> {
    gram_rows_with_block(a, BLOCK)
}

/// `A^T * A` in f64 for an f32 `A`, shape `(cols, cols)`.
pub fn gram_cols(a: ArrayView2<f32>) -> Array2<f64> {
    gram_cols_with_block(a, BLOCK)
}

#[doc(hidden)]
pub fn gram_rows_with_block(a: ArrayView2<f32>, block: usize) -> Array2<f64> {
    let n = a.nrows();
    let k = a.ncols();
    let mut out = Array2::<f64>::zeros((n, n));
    out.axis_chunks_iter_mut(Axis(0), block)
        .into_par_iter()
        .enumerate()
        .for_each(|(bi, mut rows)| {
            let r0 = bi * block;
            let r1 = (r0 + block).min(n);
            for k0 in (0..k).step_by(block) {
                let k1 = (k0 + block).min(k);
                let pi = widen(a.slice(s![r0..r1, k0..k1]));
                for c0 in (r0..n).step_by(block) {
                    let c1 = (c0 + block).min(n);
                    let pj = if c0 == r0 {
                        None
                    } else {
                        Some(widen(a.slice(s![c0..c1, k0..k1])))
                    };
                    let pj_ref = pj.as_ref().unwrap_or(&pi);
                    let mut dst = rows.slice_mut(s![.., c0..c1]);
                    general_mat_mul(1.0, &pi, &pj_ref.t(), 1.0, &mut dst);
                }
            }
        });
    mirror_upper_to_lower(&mut out);
    out
}

#[doc(hidden)]
pub fn gram_cols_with_block(a: ArrayView2<f32>, block: usize) -> Array2<f64> {
    let n = a.ncols();
    let k = a.nrows();
    let mut out = Array2::<f64>::zeros((n, n));
    out.axis_chunks_iter_mut(Axis(0), block)
        .into_par_iter()
        .enumerate()
        .for_each(|(bi, mut rows)| {
            let r0 = bi * block;
            let r1 = (r0 + block).min(n);
            for k0 in (0..k).step_by(block) {
                let k1 = (k0 + block).min(k);
                let pi = widen(a.slice(s![k0..k1, r0..r1]));
                for c0 in (r0..n).step_by(block) {
                    let c1 = (c0 + block).min(n);
                    let pj = if c0 == r0 {
                        None
                    } else {
                        Some(widen(a.slice(s![k0..k1, c0..c1])))
                    };
                    let pj_ref = pj.as_ref().unwrap_or(&pi);
                    let mut dst = rows.slice_mut(s![.., c0..c1]);
                    general_mat_mul(1.0, &pi.t(), pj_ref, 1.0, &mut dst);
                }
            }
        });
    mirror_upper_to_lower(&mut out);
    out
}

fn mirror_upper_to_lower(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 1..n {
        for j in 0..i {
            a[(i, j)] = a[(j, i)];
        }
    }
}

/// `A^T * B` in f64 where `A` is f32 `(k, m)` and `B` is f64 `(k, r)`,
/// giving `(m, r)`.
pub fn matmul_t_f32_f64(a: ArrayView2<f32>, b: ArrayView2<f64>) -> Array2<f64> {
    matmul_t_with_block(a, b, BLOCK)
}

#[doc(hidden)]
pub fn matmul_t_with_block(a: ArrayView2<f32>, b: ArrayView2<f64>, block: usize) -> Array2<f64> {
    assert_eq!(a.nrows(), b.nrows(), "contraction dims differ");
    let m = a.ncols();
    let k = a.nrows();
    let mut out = Array2::<f64>::zeros((m, b.ncols()));
    out.axis_chunks_iter_mut(Axis(0), block)
        .into_par_iter()
        .enumerate()
        .for_each(|(bi, mut rows)| {
            let r0 = bi * block;
            let r1 = (r0 + block).min(m);
            for k0 in (0..k).step_by(block) {
                let k1 = (k0 + block).min(k);
                let pa = widen(a.slice(s![k0..k1, r0..r1]));
                let pb = b.slice(s![k0..k1, ..]);
                general_mat_mul(1.0, &pa.t(), &pb, 1.0, &mut rows);
            }
        });
    out
}

/// `A * B` in f64 where `A` is f32 `(n, k)` and `B` is f64 `(k, r)`,
/// giving `(n, r)`.
pub fn matmul_f32_f64(a: ArrayView2<f32>, b: ArrayView2<f64>) -> Array2<f64> {
    matmul_with_block(a, b, BLOCK)
}

#[doc(hidden)]
pub fn matmul_with_block(a: ArrayView2<f32>, b: ArrayView2<f64>, block: usize) -> Array2<f64> {
    assert_eq!(a.ncols(), b.nrows(), "contraction dims differ");
    let n = a.nrows();
    let k = a.ncols();
    let mut out = Array2::<f64>::zeros((n, b.ncols()));
    out.axis_chunks_iter_mut(Axis(0), block)
        .into_par_iter()
        .enumerate()
        .for_each(|(bi, mut rows)| {
            let r0 = bi * block;
            let r1 = (r0 + block).min(n);
            for k0 in (0..k).step_by(block) {
                let k1 = (k0 + block).min(k);
                let pa = widen(a.slice(s![r0..r1, k0..k1]));
                let pb = b.slice(s![k0..k1, ..]);
                general_mat_mul(1.0, &pa, &pb, 1.0, &mut rows);
            }
        });
    out
}

/// In-place blocked Cholesky: on success the lower triangle (including the
/// diagonal) holds `L` with `A = L * L^T`. The strict upper triangle is
/// never written, so callers can rebuild the original symmetric matrix from
/// it after a failed attempt.
pub fn cholesky_in_place(a: &mut Array2<f64>) -> Result<()> {
    cholesky_with_block(a, BLOCK)
}

#[doc(hidden)]
pub fn cholesky_with_block(a: &mut Array2<f64>, block: usize) -> Result<()> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix must be square");
    let mut kb = 0;
    while kb < n {
        let k1 = (kb + block).min(n);
        factor_diag_block(a, kb, k1)?;
        if k1 == n {
            break;
        }
        // Panel solve: rows below the diagonal block, columns kb..k1.
        {
            let (top, mut bottom) = a.view_mut().split_at(Axis(0), k1);
            let diag = top.slice(s![kb..k1, kb..k1]);
            bottom
                .axis_chunks_iter_mut(Axis(0), block)
                .into_par_iter()
                .for_each(|band| {
                    solve_panel_band(band, diag, kb, k1);
                });
        }
        // Trailing update with a snapshot of the solved panel, so bands can
        // read every panel block while writing only their own rows.
        let panel = a.slice(s![k1.., kb..k1]).to_owned();
        let (_, mut trailing) = a.view_mut().split_at(Axis(0), k1);
        trailing
            .axis_chunks_iter_mut(Axis(0), block)
            .into_par_iter()
            .enumerate()
            .for_each(|(tb, mut band)| {
                let r0 = k1 + tb * block;
                let r1 = (r0 + block).min(n);
                let own = panel.slice(s![r0 - k1..r1 - k1, ..]);
                // Full blocks strictly left of this band's diagonal block.
                let mut j0 = k1;
                while j0 + block <= r0 {
                    let j1 = j0 + block;
                    let pj = panel.slice(s![j0 - k1..j1 - k1, ..]);
                    let mut dst = band.slice_mut(s![.., j0..j1]);
                    general_mat_mul(-1.0, &own, &pj.t(), 1.0, &mut dst);
                    j0 = j1;
                }
                // Diagonal block: subtract only the lower half so the strict
                // upper triangle stays pristine.
                let mut t = Array2::<f64>::zeros((r1 - r0, r1 - r0));
                general_mat_mul(1.0, &own, &own.t(), 0.0, &mut t);
                for r in 0..r1 - r0 {
                    for c in 0..=r {
                        band[(r, r0 + c)] -= t[(r, c)];
                    }
                }
            });
        kb = k1;
    }
    Ok(())
}

/// Serial within-block Cholesky on `a[k0..k1, k0..k1]`, reading and writing
/// the lower triangle only.
fn factor_diag_block(a: &mut Array2<f64>, k0: usize, k1: usize) -> Result<()> {
    for r in k0..k1 {
        for c in k0..=r {
            let mut sum = a[(r, c)];
            for t in k0..c {
                sum -= a[(r, t)] * a[(c, t)];
            }
            if r == c {
                if !(sum > 0.0) {
                    return Err(Error::Numerical(format!(
                        "non-positive pivot {sum:e} at row {r}"
                    )));
                }
                a[(r, r)] = sum.sqrt();
            } else {
                a[(r, c)] = sum / a[(c, c)];
            }
        }
    }
    Ok(())
}

/// Rows of `X` solving `X * L^T = B` in place, `L` lower triangular.
fn solve_panel_band(mut band: ArrayViewMut2<f64>, diag: ArrayView2<f64>, k0: usize, k1: usize) {
    let w = k1 - k0;
    for mut row in band.axis_iter_mut(Axis(0)) {
        for c in 0..w {
            let mut sum = row[k0 + c];
            for t in 0..c {
                sum -= row[k0 + t] * diag[(c, t)];
            }
            row[k0 + c] = sum / diag[(c, c)];
        }
    }
}

/// Restore a symmetric matrix after a failed in-place factorization: the
/// strict lower triangle is mirrored from the untouched strict upper, and
/// the diagonal is `saved_diag + jitter`.
pub fn restore_lower_from_upper(a: &mut Array2<f64>, saved_diag: &[f64], jitter: f64) {
    let n = a.nrows();
    assert_eq!(saved_diag.len(), n);
    for i in 0..n {
        for j in 0..i {
            a[(i, j)] = a[(j, i)];
        }
        a[(i, i)] = saved_diag[i] + jitter;
    }
}

/// Solve `L * L^T * X = B` given the factored lower triangle; columns of `B`
/// are independent and solved in parallel.
pub fn solve_factored(l: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    assert_eq!(b.nrows(), n, "rhs height mismatch");
    let mut x = b.to_owned();
    x.axis_iter_mut(Axis(1)).into_par_iter().for_each(|mut col| {
        // Forward: L y = b.
        for i in 0..n {
            let mut sum = col[i];
            let row = l.row(i);
            for j in 0..i {
                sum -= row[j] * col[j];
            }
            col[i] = sum / row[i];
        }
        // Backward: L^T x = y, consuming rows of L so reads stay contiguous.
        for j in (0..n).rev() {
            let row = l.row(j);
            let xj = col[j] / row[j];
            col[j] = xj;
            for i in 0..j {
                col[i] -= row[i] * xj;
            }
        }
    });
    x
}

/// Relative Frobenius distance `|A*X - B| / |B|`.
pub fn relative_residual(a: ArrayView2<f64>, x: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let mut ax = Array2::<f64>::zeros((a.nrows(), x.ncols()));
    general_mat_mul(1.0, &a, &x, 0.0, &mut ax);
    let mut num = 0.0;
    let mut den = 0.0;
    Zip::from(&ax).and(b).for_each(|&p, &q| {
        num += (p - q) * (p - q);
        den += q * q;
    });
    if den == 0.0 {
        return if num == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (num / den).sqrt()
}
