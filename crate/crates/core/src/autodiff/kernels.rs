//! Plain slice kernels behind the differentiable ops. Row-major layout.

use crate::real::Real;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `a[m×k] · b[k×n]`.
pub(crate) fn matmul<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut out = vec![R::zero(); m * n];
    assert!(a.len() == m * k && b.len() == k * n);
    if m * n > 0 {
        R::gemm(a, b, &mut out, m, k, n);
    }
    out
}

pub(crate) fn transpose<R: Real>(a: &[R], m: usize, n: usize) -> Vec<R> {
    let mut out = vec![R::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Softmax over contiguous rows of width `n`, with max subtraction.
pub(crate) fn softmax_rows<R: Real>(x: &[R], n: usize) -> Vec<R> {
    let mut out = vec![R::zero(); x.len()];
    if n == 0 {
        return out;
    }
    for (src, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = src.iter().copied().fold(R::neg_infinity(), R::max);
        let mut total = R::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
    out
}

pub(crate) fn log_softmax_rows<R: Real>(x: &[R], n: usize) -> Vec<R> {
    let mut out = vec![R::zero(); x.len()];
    if n == 0 {
        return out;
    }
    for (src, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = src.iter().copied().fold(R::neg_infinity(), R::max);
        let total: R = src.iter().map(|&s| (s - max).exp()).sum();
        let lse = max + total.ln();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}

/// Left-pads `shape` with ones up to `rank`.
pub(crate) fn pad_shape(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut padded = vec![1; rank - shape.len()];
    padded.extend_from_slice(shape);
    padded
}

/// True when `small` broadcasts to `big` (numpy rules, equal or unit dims).
pub(crate) fn broadcastable(small: &[usize], big: &[usize]) -> bool {
    if small.len() > big.len() {
        return false;
    }
    let padded = pad_shape(small, big.len());
    padded.iter().zip(big).all(|(&s, &b)| s == b || s == 1)
}

/// For every flat index of `big`, the flat index of `small` it reads from.
fn broadcast_map(small: &[usize], big: &[usize]) -> Vec<usize> {
    let rank = big.len();
    let padded = pad_shape(small, rank);
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    let total = numel(big);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..total {
        map.push(src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < big[d] {
                break;
            }
            src -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

pub(crate) fn broadcast_to<R: Real>(x: &[R], from: &[usize], to: &[usize]) -> Vec<R> {
    if from.iter().product::<usize>() == 1 {
        return vec![x[0]; numel(to)];
    }
    broadcast_map(from, to).into_iter().map(|i| x[i]).collect()
}

pub(crate) fn sum_to<R: Real>(x: &[R], from: &[usize], to: &[usize]) -> Vec<R> {
    let mut out = vec![R::zero(); numel(to)];
    if out.len() == 1 {
        out[0] = x.iter().copied().sum();
        return out;
    }
    for (i, j) in broadcast_map(to, from).into_iter().enumerate() {
        out[j] += x[i];
    }
    out
}

/// Splits `shape` around `axis` into (outer, axis_len, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn concat<R: Real>(
    parts: &[(&[R], &[usize])],
    axis: usize,
    out_shape: &[usize],
) -> Vec<R> {
    let (outer, _, inner) = axis_split(out_shape, axis);
    let mut out = Vec::with_capacity(numel(out_shape));
    for o in 0..outer {
        for (data, shape) in parts {
            let block = shape[axis] * inner;
            out.extend_from_slice(&data[o * block..(o + 1) * block]);
        }
    }
    out
}

pub(crate) fn slice<R: Real>(
    x: &[R],
    shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) -> Vec<R> {
    let (outer, full, inner) = axis_split(shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * full * inner + start * inner;
        out.extend_from_slice(&x[base..base + len * inner]);
    }
    out
}

/// Places `x` (sliced shape) into zeros of `full_shape` at `start` on `axis`.
pub(crate) fn unslice<R: Real>(
    x: &[R],
    full_shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) -> Vec<R> {
    let (outer, full, inner) = axis_split(full_shape, axis);
    let mut out = vec![R::zero(); numel(full_shape)];
    for o in 0..outer {
        let base = o * full * inner + start * inner;
        out[base..base + len * inner].copy_from_slice(&x[o * len * inner..(o + 1) * len * inner]);
    }
    out
}

pub(crate) fn gather_rows<R: Real>(table: &[R], width: usize, ids: &[usize]) -> Vec<R> {
    let mut out = Vec::with_capacity(ids.len() * width);
    for &id in ids {
        out.extend_from_slice(&table[id * width..(id + 1) * width]);
    }
    out
}

pub(crate) fn scatter_rows<R: Real>(x: &[R], width: usize, ids: &[usize], rows: usize) -> Vec<R> {
    let mut out = vec![R::zero(); rows * width];
    for (r, &id) in ids.iter().enumerate() {
        for (o, &v) in out[id * width..(id + 1) * width]
            .iter_mut()
            .zip(&x[r * width..(r + 1) * width])
        {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_and_sum_are_adjoint_shapes() {
        let row = [1.0, 2.0, 3.0];
        let b = broadcast_to(&row, &[1, 3], &[2, 3]);
        assert_eq!(b, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert_eq!(sum_to(&b, &[2, 3], &[1, 3]), vec![2.0, 4.0, 6.0]);
        let col = [1.0, 2.0];
        let c = broadcast_to(&col, &[2, 1], &[2, 3]);
        assert_eq!(c, vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert_eq!(sum_to(&c, &[2, 3], &[2, 1]), vec![3.0, 6.0]);
        assert_eq!(sum_to(&c, &[2, 3], &[]), vec![9.0]);
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0];
        let out = concat(&[(&a[..], &[2, 2][..]), (&b[..], &[2, 1][..])], 1, &[2, 3]);
        assert_eq!(out, vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(slice(&out, &[2, 3], 1, 2, 1), vec![5.0, 6.0]);
        assert_eq!(
            unslice(&b, &[2, 3], 1, 2, 1),
            vec![0.0, 0.0, 5.0, 0.0, 0.0, 6.0]
        );
    }

    #[test]
    fn softmax_is_overflow_safe() {
        let out = softmax_rows(&[1000.0f64, 0.0], 2);
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!(out[1].abs() < 1e-12);
    }
}
