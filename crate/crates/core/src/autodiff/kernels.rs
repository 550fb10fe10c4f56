//! Numeric kernels behind the graph primitives.
//!
//! Every kernel has a fixed reduction order, so a value depends only on its
//! inputs and never on the number of worker threads.

use super::tensor::Tensor;
use crate::par::*;

/// Below this many multiply-adds a matmul stays on the calling thread.
const PAR_MATMUL_WORK: usize = 1 << 16;

pub(crate) const LOG_FLOOR: f64 = 1e-12;

/// Shape of `op(a) @ op(b)` where `op` optionally transposes.
pub(crate) fn matmul_shape(a: (usize, usize), b: (usize, usize), ta: bool, tb: bool) -> Option<(usize, usize, usize)> {
    let (m, k) = if ta { (a.1, a.0) } else { a };
    let (k2, n) = if tb { (b.1, b.0) } else { b };
    (k == k2).then_some((m, k, n))
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (m, k, n) = matmul_shape(a.shape(), b.shape(), ta, tb).unwrap_or_else(|| {
        panic!(
            "matmul shape mismatch: {:?}{} x {:?}{}",
            a.shape(),
            if ta { "^T" } else { "" },
            b.shape(),
            if tb { "^T" } else { "" }
        )
    });
    let mut out = vec![0.0; m * n];
    if m == 0 || n == 0 {
        return Tensor::new(m, n, out);
    }
    let ad = a.data();
    let bd = b.data();
    let a_cols = a.cols();
    let b_cols = b.cols();
    let a_at = |i: usize, p: usize| if ta { ad[p * a_cols + i] } else { ad[i * a_cols + p] };

    let fill_row = |i: usize, row: &mut [f64]| {
        if tb {
            // row[j] = sum_p a(i,p) * b[j][p]
            for (j, slot) in row.iter_mut().enumerate() {
                let brow = &bd[j * b_cols..j * b_cols + k];
                let mut acc = 0.0;
                for (p, &bv) in brow.iter().enumerate() {
                    acc += a_at(i, p) * bv;
                }
                *slot = acc;
            }
        } else {
            for p in 0..k {
                let av = a_at(i, p);
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * b_cols..p * b_cols + n];
                for (slot, &bv) in row.iter_mut().zip(brow) {
                    *slot += av * bv;
                }
            }
        }
    };

    if m > 1 && m * n * k >= PAR_MATMUL_WORK {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| fill_row(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            fill_row(i, row);
        }
    }
    Tensor::new(m, n, out)
}

/// Output shape of a broadcasting elementwise op. Each operand must either
/// match the output along an axis or have extent 1 there.
pub(crate) fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    fn dim(x: usize, y: usize) -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    }
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

pub(crate) fn broadcast_binary(a: &Tensor, b: &Tensor, name: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (rows, cols) = broadcast_shape(a.shape(), b.shape()).unwrap_or_else(|| {
        panic!("{name} shape mismatch: {:?} vs {:?}", a.shape(), b.shape())
    });
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(rows, cols, data);
    }
    let at = |t: &Tensor, r: usize, c: usize| {
        let rr = if t.rows() == 1 { 0 } else { r };
        let cc = if t.cols() == 1 { 0 } else { c };
        t.get(rr, cc)
    };
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            data.push(f(at(a, r, c), at(b, r, c)));
        }
    }
    Tensor::new(rows, cols, data)
}

pub(crate) fn sum_all(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data().iter().sum())
}

/// Sums over rows: `m x n -> 1 x n`.
pub(crate) fn sum_over_rows(a: &Tensor) -> Tensor {
    let mut out = vec![0.0; a.cols()];
    for r in 0..a.rows() {
        for (o, &v) in out.iter_mut().zip(a.row_slice(r)) {
            *o += v;
        }
    }
    Tensor::new(1, a.cols(), out)
}

/// Sums over columns: `m x n -> m x 1`.
pub(crate) fn sum_over_cols(a: &Tensor) -> Tensor {
    let out = (0..a.rows()).map(|r| a.row_slice(r).iter().sum()).collect();
    Tensor::new(a.rows(), 1, out)
}

/// Row-wise log-sum-exp: `m x n -> m x 1`.
pub(crate) fn logsumexp_rows(a: &Tensor) -> Tensor {
    let out = (0..a.rows())
        .map(|r| {
            let row = a.row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return max;
            }
            max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
        })
        .collect();
    Tensor::new(a.rows(), 1, out)
}

pub(crate) fn concat_cols(parts: &[&Tensor]) -> Tensor {
    let rows = parts[0].rows();
    for p in parts {
        assert_eq!(p.rows(), rows, "concat row mismatch: {:?} vs {rows} rows", p.shape());
    }
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row_slice(r));
        }
    }
    Tensor::new(rows, cols, data)
}

pub(crate) fn slice_cols(a: &Tensor, start: usize, len: usize) -> Tensor {
    assert!(
        start + len <= a.cols(),
        "column slice {start}..{} out of range for {:?}",
        start + len,
        a.shape()
    );
    let mut data = Vec::with_capacity(a.rows() * len);
    for r in 0..a.rows() {
        data.extend_from_slice(&a.row_slice(r)[start..start + len]);
    }
    Tensor::new(a.rows(), len, data)
}

pub(crate) fn gather_rows(a: &Tensor, indices: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(indices.len() * a.cols());
    for &i in indices {
        assert!(i < a.rows(), "gather index {i} out of range for {} rows", a.rows());
        data.extend_from_slice(a.row_slice(i));
    }
    Tensor::new(indices.len(), a.cols(), data)
}

/// Adjoint of [`gather_rows`]: adds row `k` of `a` into row `indices[k]`.
pub(crate) fn scatter_add_rows(a: &Tensor, indices: &[usize], rows: usize) -> Tensor {
    assert_eq!(a.rows(), indices.len(), "scatter index count mismatch");
    let cols = a.cols();
    let mut out = vec![0.0; rows * cols];
    for (k, &i) in indices.iter().enumerate() {
        assert!(i < rows, "scatter index {i} out of range for {rows} rows");
        for (o, &v) in out[i * cols..(i + 1) * cols].iter_mut().zip(a.row_slice(k)) {
            *o += v;
        }
    }
    Tensor::new(rows, cols, out)
}

pub(crate) fn floored_ln(v: f64) -> f64 {
    v.max(LOG_FLOOR).ln()
}

pub(crate) fn normal_cdf(v: f64) -> f64 {
    0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}
