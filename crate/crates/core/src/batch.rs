//! Internal row-major batch buffers and the small dense kernels the layer
//! implementations are built on.
//!
//! Per output element, additions always run in ascending inner-index order,
//! so a batched pass is bitwise identical to the equivalent sequence of
//! single-sample passes, independent of thread schedule and of which kernel
//! variant (blocked or plain) handled the row.

use rayon::prelude::*;

/// A batch of `rows` samples, each with per-sample `shape`, stored
/// contiguously row-major.
#[derive(Debug, Clone)]
pub(crate) struct Batch {
    pub rows: usize,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Batch {
    pub fn zeros(rows: usize, shape: Vec<usize>) -> Self {
        let stride: usize = shape.iter().product();
        Batch {
            rows,
            shape,
            data: vec![0.0; rows * stride],
        }
    }

    pub fn stride(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let s = self.stride();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.stride();
        &mut self.data[i * s..(i + 1) * s]
    }
}

/// Work size below which parallelizing a kernel costs more than it saves.
const PAR_FLOP_THRESHOLD: usize = 1 << 16;

/// Rows of A handled per register block.
const ROW_BLOCK: usize = 4;

fn gemm_block(cblock: &mut [f64], ablock: &[f64], b: &[f64], k: usize, n: usize) {
    let rows = ablock.len() / k;
    if rows == ROW_BLOCK {
        let (c0, rest) = cblock.split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for p in 0..k {
            let (v0, v1, v2, v3) = (
                ablock[p],
                ablock[k + p],
                ablock[2 * k + p],
                ablock[3 * k + p],
            );
            if v0 == 0.0 && v1 == 0.0 && v2 == 0.0 && v3 == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (j, &bv) in brow.iter().enumerate() {
                c0[j] += v0 * bv;
                c1[j] += v1 * bv;
                c2[j] += v2 * bv;
                c3[j] += v3 * bv;
            }
        }
    } else {
        for (crow, arow) in cblock.chunks_mut(n).zip(ablock.chunks(k)) {
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

/// C[m x n] += A[m x k] * B[k x n], all row-major.
pub(crate) fn gemm_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    if m * k * n >= PAR_FLOP_THRESHOLD && m > ROW_BLOCK {
        c.par_chunks_mut(ROW_BLOCK * n)
            .zip(a.par_chunks(ROW_BLOCK * k))
            .for_each(|(cb, ab)| gemm_block(cb, ab, b, k, n));
    } else {
        c.chunks_mut(ROW_BLOCK * n)
            .zip(a.chunks(ROW_BLOCK * k))
            .for_each(|(cb, ab)| gemm_block(cb, ab, b, k, n));
    }
}

/// C[m x n] += A[m x k] * B^T with B stored row-major [n x k].
///
/// Dot-product form, used for single rows where materializing a transpose
/// would dominate; the per-element accumulation order (ascending k) matches
/// `gemm_acc` exactly.
pub(crate) fn gemm_acc_bt(c: &mut [f64], a: &[f64], bt: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(bt.len(), n * k);
    for (crow, arow) in c.chunks_mut(n).zip(a.chunks(k)) {
        for (cv, brow) in crow.iter_mut().zip(bt.chunks(k)) {
            let mut acc = *cv;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv = acc;
        }
    }
}

/// Row-major transpose: src is [rows x cols], dst becomes [cols x rows].
pub(crate) fn transpose(src: &[f64], rows: usize, cols: usize, dst: &mut Vec<f64>) {
    dst.clear();
    dst.resize(rows * cols, 0.0);
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}
