//! Array kernels shared by the forward and backward passes.

use crate::tensor::{numel, DenseArray};

/// Output shape of an elementwise binary op under the supported broadcast
/// rules: identical shapes, a single-element operand, or one shape being a
/// trailing suffix of the other.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b {
        return Some(a.to_vec());
    }
    let (na, nb) = (numel(a), numel(b));
    if nb == 1 {
        return Some(a.to_vec());
    }
    if na == 1 {
        return Some(b.to_vec());
    }
    if a.len() > b.len() && a.ends_with(b) {
        return Some(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Some(b.to_vec());
    }
    None
}

/// Elementwise binary op; smaller operands repeat cyclically, which is exactly
/// suffix (leading-axis) and scalar broadcasting in row-major layout.
pub(crate) fn binary(
    a: &DenseArray,
    b: &DenseArray,
    out_shape: Vec<usize>,
    f: impl Fn(f64, f64) -> f64,
) -> DenseArray {
    let n = numel(&out_shape);
    let (ad, bd) = (a.data(), b.data());
    let data = if ad.len() == n && bd.len() == n {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else if ad.len() == n {
        let m = bd.len();
        ad.iter().enumerate().map(|(k, &x)| f(x, bd[k % m])).collect()
    } else {
        let m = ad.len();
        bd.iter().enumerate().map(|(k, &y)| f(ad[k % m], y)).collect()
    };
    DenseArray::from_parts(out_shape, data)
}

/// Folds a gradient of the broadcast output back onto an operand of `len` entries.
pub(crate) fn reduce_to(grad: &[f64], len: usize, shape: &[usize]) -> DenseArray {
    if grad.len() == len {
        return DenseArray::from_parts(shape.to_vec(), grad.to_vec());
    }
    let mut out = vec![0.0; len];
    for (k, g) in grad.iter().enumerate() {
        out[k % len] += g;
    }
    DenseArray::from_parts(shape.to_vec(), out)
}

/// `C (m x n) = alpha * A (m x k) * B (k x n) + beta * C` with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every index reachable through the given strides
    // (dense m x k, k x n and m x n layouts, possibly transposed).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Normalized description of a (possibly batched) matrix product.
#[derive(Clone, Debug)]
pub(crate) struct MatMulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// Number of matrices in each operand and in the output.
    pub batch_a: usize,
    pub batch_b: usize,
    pub batch: usize,
    pub out_shape: Vec<usize>,
}

pub(crate) fn plan_matmul(a: &[usize], b: &[usize]) -> Result<MatMulPlan, String> {
    if a.is_empty() || b.is_empty() {
        return Err(format!("matmul needs at least 1-d operands, got {a:?} x {b:?}"));
    }
    let a_vec = a.len() == 1;
    let b_vec = b.len() == 1;
    let (a_batch, m, k) = if a_vec {
        (&[][..], 1, a[0])
    } else {
        (&a[..a.len() - 2], a[a.len() - 2], a[a.len() - 1])
    };
    let (b_batch, kb, n) = if b_vec {
        (&[][..], b[0], 1)
    } else {
        (&b[..b.len() - 2], b[b.len() - 2], b[b.len() - 1])
    };
    if k != kb {
        return Err(format!("inner dimensions differ: {a:?} x {b:?}"));
    }
    let out_batch = if a_batch.len() >= b_batch.len() {
        if !a_batch.ends_with(b_batch) {
            return Err(format!("batch dimensions incompatible: {a:?} x {b:?}"));
        }
        a_batch
    } else {
        if !b_batch.ends_with(a_batch) {
            return Err(format!("batch dimensions incompatible: {a:?} x {b:?}"));
        }
        b_batch
    };
    let mut out_shape = out_batch.to_vec();
    if !a_vec {
        out_shape.push(m);
    }
    if !b_vec {
        out_shape.push(n);
    }
    Ok(MatMulPlan {
        m,
        k,
        n,
        batch_a: numel(a_batch),
        batch_b: numel(b_batch),
        batch: numel(out_batch),
        out_shape,
    })
}

pub(crate) fn matmul(p: &MatMulPlan, a: &[f64], b: &[f64]) -> Vec<f64> {
    let (m, k, n) = (p.m, p.k, p.n);
    let mut c = vec![0.0; p.batch * m * n];
    if p.batch_b == 1 {
        // every a-matrix shares b: one tall product
        let rows = p.batch_a * m;
        gemm(rows, k, n, a, (k as isize, 1), b, (n as isize, 1), 0.0, &mut c);
        if p.batch > p.batch_a {
            let block = rows * n;
            for q in 1..p.batch / p.batch_a {
                c.copy_within(0..block, q * block);
            }
        }
        return c;
    }
    for q in 0..p.batch {
        let ia = (q % p.batch_a) * m * k;
        let ib = (q % p.batch_b) * k * n;
        gemm(
            m,
            k,
            n,
            &a[ia..ia + m * k],
            (k as isize, 1),
            &b[ib..ib + k * n],
            (n as isize, 1),
            0.0,
            &mut c[q * m * n..(q + 1) * m * n],
        );
    }
    c
}

/// Gradients of a matrix product with respect to both operands.
pub(crate) fn matmul_backward(
    p: &MatMulPlan,
    a: &[f64],
    b: &[f64],
    g: &[f64],
    need_a: bool,
    need_b: bool,
) -> (Vec<f64>, Vec<f64>) {
    let (m, k, n) = (p.m, p.k, p.n);
    let mut ga = if need_a { vec![0.0; p.batch_a * m * k] } else { Vec::new() };
    let mut gb = if need_b { vec![0.0; p.batch_b * k * n] } else { Vec::new() };
    if p.batch_b == 1 && p.batch == p.batch_a {
        let rows = p.batch_a * m;
        if need_a {
            // dA = dC * B^T
            gemm(rows, n, k, g, (n as isize, 1), b, (1, n as isize), 0.0, &mut ga);
        }
        if need_b {
            // dB = A^T * dC
            gemm(k, rows, n, a, (1, k as isize), g, (n as isize, 1), 0.0, &mut gb);
        }
        return (ga, gb);
    }
    for q in 0..p.batch {
        let ia = (q % p.batch_a) * m * k;
        let ib = (q % p.batch_b) * k * n;
        let gq = &g[q * m * n..(q + 1) * m * n];
        if need_a {
            gemm(
                m,
                n,
                k,
                gq,
                (n as isize, 1),
                &b[ib..ib + k * n],
                (1, n as isize),
                1.0,
                &mut ga[ia..ia + m * k],
            );
        }
        if need_b {
            gemm(
                k,
                m,
                n,
                &a[ia..ia + m * k],
                (1, k as isize),
                gq,
                (n as isize, 1),
                1.0,
                &mut gb[ib..ib + k * n],
            );
        }
    }
    (ga, gb)
}

/// Swaps the last two axes.
pub(crate) fn transpose_last2(shape: &[usize], data: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let r = shape.len();
    let (rows, cols) = (shape[r - 2], shape[r - 1]);
    let mut out_shape = shape.to_vec();
    out_shape.swap(r - 2, r - 1);
    let mut out = vec![0.0; data.len()];
    for (blk, chunk) in data.chunks(rows * cols).enumerate() {
        let base = blk * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                out[base + j * rows + i] = chunk[i * cols + j];
            }
        }
    }
    (out_shape, out)
}

/// `(outer, len, inner)` decomposition around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

pub(crate) fn reduced_shape(shape: &[usize], axis: usize, keep: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keep {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

pub(crate) fn sum_axis(shape: &[usize], data: &[f64], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for l in 0..len {
            let src = &data[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out
}

/// Maximum along an axis together with the first index attaining it.
pub(crate) fn max_axis(shape: &[usize], data: &[f64], axis: usize) -> (Vec<f64>, Vec<usize>) {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![f64::NEG_INFINITY; outer * inner];
    let mut arg = vec![0usize; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            for i in 0..inner {
                let v = data[(o * len + l) * inner + i];
                let slot = o * inner + i;
                // strict comparison keeps the first maximal index on ties
                if v > out[slot] || l == 0 {
                    out[slot] = v;
                    arg[slot] = l;
                }
            }
        }
    }
    (out, arg)
}

/// Spreads a reduced gradient back along `axis`, scaled by `scale`.
pub(crate) fn expand_axis(shape: &[usize], g: &[f64], axis: usize, scale: f64) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        let src = &g[o * inner..(o + 1) * inner];
        for l in 0..len {
            let dst = &mut out[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = scale * s;
            }
        }
    }
    out
}

pub(crate) fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = (x - m).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d /= z;
        }
    }
    out
}

pub(crate) fn log_softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = x - lse;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[3], &[4, 2, 3]), Some(vec![4, 2, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[1]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
        assert_eq!(broadcast_shape(&[2, 3], &[2, 1]), None);
    }

    #[test]
    fn batched_matmul_broadcasts_leading_batch() {
        // a: (2, 1, 2) batch of row vectors, b: (2, 1) shared
        let p = plan_matmul(&[2, 1, 2], &[2, 1]).unwrap();
        assert_eq!(p.out_shape, vec![2, 1, 1]);
        let c = matmul(&p, &[1.0, 2.0, 3.0, 4.0], &[10.0, 1.0]);
        assert_eq!(c, vec![12.0, 34.0]);
        // a shared across a batch of b
        let p = plan_matmul(&[1, 2], &[3, 2, 1]).unwrap();
        assert_eq!(p.out_shape, vec![3, 1, 1]);
        let c = matmul(&p, &[1.0, 1.0], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(c, vec![3.0, 7.0, 11.0]);
    }

    #[test]
    fn max_ties_pick_first() {
        let (v, a) = max_axis(&[3], &[2.0, 5.0, 5.0], 0);
        assert_eq!(v, vec![5.0]);
        assert_eq!(a, vec![1]);
    }
}
