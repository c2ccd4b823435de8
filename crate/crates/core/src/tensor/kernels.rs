//! Forward/backward numeric kernels shared by graph ops.

use super::{split_at_axis, Tensor};
use crate::error::{Error, Result};

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast `out` shape (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| if i < pad || shape[i - pad] == 1 { 0 } else { own[i - pad] })
        .collect()
}

fn strip_leading_ones(shape: &[usize]) -> &[usize] {
    let k = shape.iter().take_while(|&&d| d == 1).count();
    &shape[k..]
}

/// Whether `small` broadcasts into `out` purely as a repeated trailing block.
fn is_trailing_block(small: &[usize], out: &[usize]) -> bool {
    let s = strip_leading_ones(small);
    s.len() <= out.len() && out[out.len() - s.len()..] == *s
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of the broadcast shape.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for flat in 0..n {
        f(flat, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor { shape: a.shape.clone(), data });
    }
    let out = broadcast_shape(&a.shape, &b.shape)?;
    let n: usize = out.iter().product();
    if a.shape == out && is_trailing_block(&b.shape, &out) && b.numel() > 0 {
        let m = b.numel();
        let data = a.data.iter().enumerate().map(|(i, &x)| f(x, b.data[i % m])).collect();
        return Ok(Tensor { shape: out, data });
    }
    if b.shape == out && is_trailing_block(&a.shape, &out) && a.numel() > 0 {
        let m = a.numel();
        let data = b.data.iter().enumerate().map(|(i, &y)| f(a.data[i % m], y)).collect();
        return Ok(Tensor { shape: out, data });
    }
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let mut data = vec![0.0; n];
    for_each_broadcast(&out, &sa, &sb, |i, ia, ib| data[i] = f(a.data[ia], b.data[ib]));
    Ok(Tensor { shape: out, data })
}

/// Sums `g` (of a broadcast shape) down to `shape`.
pub(crate) fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape == shape {
        return g.clone();
    }
    let m: usize = shape.iter().product();
    let mut data = vec![0.0; m];
    if m > 0 && is_trailing_block(shape, &g.shape) {
        for chunk in g.data.chunks_exact(m) {
            for (d, &x) in data.iter_mut().zip(chunk) {
                *d += x;
            }
        }
    } else if m > 0 {
        let sa = broadcast_strides(shape, &g.shape);
        let zeros = vec![0; g.shape.len()];
        for_each_broadcast(&g.shape, &sa, &zeros, |i, ia, _| data[ia] += g.data[i]);
    }
    Tensor { shape: shape.to_vec(), data }
}

/// `c (+)= op(a) · op(b)` on row-major matrices, where `op` optionally transposes.
/// `a` is `m×k` after `op`, `b` is `k×n` after `op`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
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

pub(crate) fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::shape(format!("{perm:?} is not a permutation of rank {rank}")));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
    let in_strides = strides(&x.shape);
    let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut data = vec![0.0; x.numel()];
    let zeros = vec![0; rank];
    for_each_broadcast(&out_shape, &src, &zeros, |i, ia, _| data[i] = x.data[ia]);
    Ok(Tensor { shape: out_shape, data })
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn softmax_axis(x: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = split_at_axis(&x.shape, axis);
    let mut data = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                mx = mx.max(data[base + j * inner]);
            }
            let mut s = 0.0;
            for j in 0..n {
                let e = (data[base + j * inner] - mx).exp();
                data[base + j * inner] = e;
                s += e;
            }
            for j in 0..n {
                data[base + j * inner] /= s;
            }
        }
    }
    Tensor { shape: x.shape.clone(), data }
}

pub(crate) fn log_softmax_axis(x: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = split_at_axis(&x.shape, axis);
    let mut data = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                mx = mx.max(data[base + j * inner]);
            }
            let s: f64 = (0..n).map(|j| (data[base + j * inner] - mx).exp()).sum();
            let lse = mx + s.ln();
            for j in 0..n {
                data[base + j * inner] -= lse;
            }
        }
    }
    Tensor { shape: x.shape.clone(), data }
}

/// Sum over `axis`, removing it.
pub(crate) fn sum_axis(x: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = split_at_axis(&x.shape, axis);
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..n {
            let src = &x.data[(o * n + j) * inner..(o * n + j + 1) * inner];
            for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = x.shape.clone();
    shape.remove(axis);
    Tensor { shape, data }
}

/// Inverse of [`sum_axis`]: repeats `g` `n` times along a new `axis`.
pub(crate) fn expand_axis(g: &Tensor, axis: usize, n: usize, scale: f64) -> Tensor {
    let mut shape = g.shape.clone();
    shape.insert(axis, n);
    let (outer, _, inner) = split_at_axis(&shape, axis);
    let mut data = Vec::with_capacity(outer * n * inner);
    for o in 0..outer {
        let src = &g.data[o * inner..(o + 1) * inner];
        for _ in 0..n {
            data.extend(src.iter().map(|&v| v * scale));
        }
    }
    Tensor { shape, data }
}

/// Rotates consecutive pairs of the last axis by `sign * pos * base^(-2t/d)`,
/// with `pos` the index along the second-to-last axis.
pub(crate) fn rope_rotate(x: &Tensor, base: f64, sign: f64) -> Result<Tensor> {
    let rank = x.rank();
    if rank < 2 {
        return Err(Error::shape("rope needs a tensor of rank >= 2 ([.., L, d])"));
    }
    let d = x.shape[rank - 1];
    let l = x.shape[rank - 2];
    if d % 2 != 0 {
        return Err(Error::shape(format!("rope needs an even feature dimension, got {d}")));
    }
    let table = rope_table(l, d, base);
    let mut data = x.data.clone();
    for block in data.chunks_exact_mut(l * d) {
        for (pos, v) in block.chunks_exact_mut(d).enumerate() {
            for t in 0..d / 2 {
                let (c, s) = table[pos * (d / 2) + t];
                let s = s * sign;
                let (a, b) = (v[2 * t], v[2 * t + 1]);
                v[2 * t] = a * c - b * s;
                v[2 * t + 1] = a * s + b * c;
            }
        }
    }
    Ok(Tensor { shape: x.shape.clone(), data })
}

fn rope_table(l: usize, d: usize, base: f64) -> Vec<(f64, f64)> {
    let mut table = Vec::with_capacity(l * d / 2);
    for pos in 0..l {
        for t in 0..d / 2 {
            let theta = pos as f64 * base.powf(-2.0 * t as f64 / d as f64);
            table.push((theta.cos(), theta.sin()));
        }
    }
    table
}

pub(crate) fn gather_axis(x: &Tensor, axis: usize, indices: &[usize]) -> Result<Tensor> {
    let (outer, n, inner) = split_at_axis(&x.shape, axis);
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::shape(format!("gather index {bad} out of range for axis of size {n}")));
    }
    let mut data = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        for &i in indices {
            data.extend_from_slice(&x.data[(o * n + i) * inner..(o * n + i + 1) * inner]);
        }
    }
    let mut shape = x.shape.clone();
    shape[axis] = indices.len();
    Ok(Tensor { shape, data })
}

pub(crate) fn scatter_add_axis(g: &Tensor, shape: &[usize], axis: usize, indices: &[usize]) -> Tensor {
    let (outer, n, inner) = split_at_axis(shape, axis);
    let mut data = vec![0.0; outer * n * inner];
    let k = indices.len();
    for o in 0..outer {
        for (j, &i) in indices.iter().enumerate() {
            let src = &g.data[(o * k + j) * inner..(o * k + j + 1) * inner];
            for (d, &s) in data[(o * n + i) * inner..(o * n + i + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    Tensor { shape: shape.to_vec(), data }
}

pub(crate) fn slice_axis(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let (outer, n, inner) = split_at_axis(&x.shape, axis);
    if start + len > n {
        return Err(Error::shape(format!("slice {start}..{} out of range for axis of size {n}", start + len)));
    }
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        data.extend_from_slice(&x.data[(o * n + start) * inner..(o * n + start + len) * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = len;
    Ok(Tensor { shape, data })
}

pub(crate) fn concat_axis(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    let rank = first.rank();
    super::check_axis(axis, rank)?;
    for p in parts {
        if p.rank() != rank
            || p.shape.iter().enumerate().any(|(i, &d)| i != axis && d != first.shape[i])
        {
            return Err(Error::shape(format!(
                "concat along {axis}: {:?} vs {:?}",
                first.shape, p.shape
            )));
        }
    }
    let (outer, _, inner) = split_at_axis(&first.shape, axis);
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let w = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * w..(o + 1) * w]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Ok(Tensor { shape, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert!(broadcast_shape(&[2, 3], &[2]).is_err());
    }

    #[test]
    fn binary_general_and_fast_paths_agree() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let col = t(&[2, 1], &[10., 20.]);
        let row = t(&[3], &[1., 1., 1.]);
        assert_eq!(binary(&a, &col, |x, y| x + y).unwrap().data, vec![11., 12., 13., 24., 25., 26.]);
        assert_eq!(binary(&a, &row, |x, y| x + y).unwrap().data, vec![2., 3., 4., 5., 6., 7.]);
        assert_eq!(binary(&row, &a, |x, y| x - y).unwrap().data, vec![0., -1., -2., -3., -4., -5.]);
        let g = Tensor::ones(&[2, 3]);
        assert_eq!(reduce_to(&g, &[2, 1]).data, vec![3., 3.]);
        assert_eq!(reduce_to(&g, &[3]).data, vec![2., 2., 2.]);
        assert_eq!(reduce_to(&g, &[]).data, vec![6.]);
    }

    #[test]
    fn gemm_matches_hand_product() {
        // [[1,2,3],[4,5,6]] · [[7,8],[9,10],[11,12]] = [[58,64],[139,154]]
        let a = [1., 2., 3., 4., 5., 6.];
        let b = [7., 8., 9., 10., 11., 12.];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [58., 64., 139., 154.]);
        // aᵀ stored as 3×2 gives the same product
        let at = [1., 4., 2., 5., 3., 6.];
        gemm(2, 3, 2, &at, true, &b, false, &mut c, false);
        assert_eq!(c, [58., 64., 139., 154.]);
    }

    #[test]
    fn permute_and_inverse() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let y = permute(&x, &[1, 0]).unwrap();
        assert_eq!(y.shape, vec![3, 2]);
        assert_eq!(y.data, vec![1., 4., 2., 5., 3., 6.]);
        assert_eq!(permute(&y, &inverse_perm(&[1, 0])).unwrap(), x);
        assert!(permute(&x, &[0, 0]).is_err());
    }

    #[test]
    fn rope_rotation_is_invertible() {
        let x = t(&[3, 4], &[1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11., 12.]);
        let r = rope_rotate(&x, 10000.0, 1.0).unwrap();
        assert_eq!(&r.data[..4], &x.data[..4]);
        let back = rope_rotate(&r, 10000.0, -1.0).unwrap();
        for (a, b) in back.data.iter().zip(&x.data) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(rope_rotate(&t(&[1, 3], &[1., 2., 3.]), 10000.0, 1.0).is_err());
    }
}
