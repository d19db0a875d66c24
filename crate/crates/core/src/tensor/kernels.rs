//! Forward kernels shared by the graph ops and their backward passes.

use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Numpy-style broadcast of two shapes (aligned from the right).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for (i, slot) in out.iter_mut().enumerate() {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        *slot = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape {
                    op: "broadcast",
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], from_right: usize) -> usize {
    if from_right < shape.len() {
        shape[shape.len() - 1 - from_right]
    } else {
        1
    }
}

/// Strides of `shape` laid over `out`, with zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; out.len()];
    let offset = out.len() - shape.len();
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 && out[offset + i] != 1 {
            0
        } else {
            acc
        };
        acc *= shape[i];
    }
    strides
}

fn is_suffix(inner: &[usize], outer: &[usize]) -> bool {
    inner.len() <= outer.len() && outer[outer.len() - inner.len()..] == *inner
}

/// Visit every output index with the matching flat offsets into `a` and `b`.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for flat in 0..n {
        f(flat, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn binary<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_vec(a.shape.clone(), data));
    }
    let out = broadcast_shape(&a.shape, &b.shape)?;
    if a.shape == out && is_suffix(&b.shape, &out) && b.numel() > 0 {
        let bd = b.data();
        let mut data = Vec::with_capacity(a.numel());
        for chunk in a.data.chunks(bd.len()) {
            data.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
        }
        return Ok(Tensor::from_vec(out, data));
    }
    if b.shape == out && is_suffix(&a.shape, &out) && a.numel() > 0 {
        let ad = a.data();
        let mut data = Vec::with_capacity(b.numel());
        for chunk in b.data.chunks(ad.len()) {
            data.extend(ad.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
        }
        return Ok(Tensor::from_vec(out, data));
    }
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let mut data = vec![T::zero(); numel(&out)];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    Ok(Tensor::from_vec(out, data))
}

/// Sum `grad` down to `shape`, undoing a broadcast.
pub(crate) fn reduce_to_shape<T: Real>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape == shape {
        return grad.clone();
    }
    let n = numel(shape);
    let mut data = vec![T::zero(); n];
    if is_suffix(shape, &grad.shape) && n > 0 {
        for chunk in grad.data.chunks(n) {
            for (acc, &g) in data.iter_mut().zip(chunk) {
                *acc += g;
            }
        }
    } else {
        let out = grad.shape.clone();
        let s = broadcast_strides(shape, &out);
        let zero = vec![0; out.len()];
        let gd = grad.data();
        for_each_broadcast(&out, &s, &zero, |o, i, _| data[i] += gd[o]);
    }
    Tensor::from_vec(shape.to_vec(), data)
}

/// `(m, k)` of `op(x)` for the trailing matrix of `shape`, plus (row, col) strides.
fn mat_view(shape: &[usize], trans: bool) -> (usize, usize, isize, isize) {
    let r0 = shape[shape.len() - 2];
    let r1 = shape[shape.len() - 1];
    if trans {
        (r1, r0, 1, r1 as isize)
    } else {
        (r0, r1, r1 as isize, 1)
    }
}

const SMALL_GEMM: usize = 4096;

/// `c[m×n] (+)= a[m×k] · b[k×n]` on raw strided slices.
#[allow(clippy::too_many_arguments)]
fn gemm_into<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    c: &mut [T],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if m * k * n <= SMALL_GEMM {
        for i in 0..m {
            for j in 0..n {
                let mut acc = T::zero();
                for p in 0..k {
                    let av = a[(i as isize * rsa + p as isize * csa) as usize];
                    let bv = b[(p as isize * rsb + j as isize * csb) as usize];
                    acc += av * bv;
                }
                let slot = &mut c[i * n + j];
                if accumulate {
                    *slot += acc;
                } else {
                    *slot = acc;
                }
            }
        }
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the caller sizes every slice to cover the strided m×k, k×n and
    // m×n regions; `c` is a distinct mutable borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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

/// Batched `op(a) · op(b)` with broadcasting over leading dimensions.
pub(crate) fn matmul<T: Real>(
    a: &Tensor<T>,
    trans_a: bool,
    b: &Tensor<T>,
    trans_b: bool,
) -> Result<Tensor<T>> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::Shape {
            op: "matmul (rank < 2)",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, rsa, csa) = mat_view(&a.shape, trans_a);
    let (k2, n, rsb, csb) = mat_view(&b.shape, trans_b);
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let batch_a = &a.shape[..a.rank() - 2];
    let batch_b = &b.shape[..b.rank() - 2];

    // A shared right-hand matrix: fold a's batch into its rows.
    if batch_b.is_empty() && !trans_a {
        let rows = numel(batch_a) * m;
        let mut data = vec![T::zero(); rows * n];
        gemm_into(rows, k, n, a.data(), rsa, csa, b.data(), rsb, csb, &mut data, false);
        let mut shape = batch_a.to_vec();
        shape.extend([m, n]);
        return Ok(Tensor::from_vec(shape, data));
    }

    let batch = broadcast_shape(batch_a, batch_b)?;
    let sa = broadcast_strides(batch_a, &batch);
    let sb = broadcast_strides(batch_b, &batch);
    let (ma, mb) = (m * k, k * n);
    let mut data = vec![T::zero(); numel(&batch) * m * n];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&batch, &sa, &sb, |o, ia, ib| {
        gemm_into(
            m,
            k,
            n,
            &ad[ia * ma..(ia + 1) * ma],
            rsa,
            csa,
            &bd[ib * mb..(ib + 1) * mb],
            rsb,
            csb,
            &mut data[o * m * n..(o + 1) * m * n],
            false,
        );
    });
    let mut shape = batch;
    shape.extend([m, n]);
    Ok(Tensor::from_vec(shape, data))
}

pub(crate) fn permute<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::InvalidArgument(format!(
            "permutation {perm:?} for rank {rank}"
        )));
    }
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * x.shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zero = vec![0; rank];
    let mut data = vec![T::zero(); x.numel()];
    let xd = x.data();
    for_each_broadcast(&out_shape, &strides, &zero, |o, i, _| data[o] = xd[i]);
    Ok(Tensor::from_vec(out_shape, data))
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// (outer, n, inner) view of `shape` around `axis`.
pub(crate) fn axis_view(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

pub(crate) fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = axis_view(&x.shape, axis);
    let xd = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..n {
                max = max.max(xd[base + j * inner]);
            }
            let mut total = T::zero();
            for j in 0..n {
                let e = (xd[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                total += e;
            }
            let inv = T::one() / total;
            for j in 0..n {
                out[base + j * inner] *= inv;
            }
        }
    }
    Tensor::from_vec(x.shape.clone(), out)
}

pub(crate) fn softmax_backward<T: Real>(y: &Tensor<T>, gy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = axis_view(&y.shape, axis);
    let (yd, gd) = (y.data(), gy.data());
    let mut out = vec![T::zero(); y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut dot = T::zero();
            for j in 0..n {
                dot += yd[base + j * inner] * gd[base + j * inner];
            }
            for j in 0..n {
                let at = base + j * inner;
                out[at] = yd[at] * (gd[at] - dot);
            }
        }
    }
    Tensor::from_vec(y.shape.clone(), out)
}

/// Row-wise log-softmax over the last axis of a `[rows, v]` buffer.
pub(crate) fn log_softmax_rows<T: Real>(data: &[T], v: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for (row, dst) in data.chunks(v).zip(out.chunks_mut(v)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = x - lse;
        }
    }
    out
}

pub struct LayerNormSaved<T> {
    pub(crate) normalized: Tensor<T>,
    pub(crate) inv_std: Vec<T>,
}

pub(crate) fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormSaved<T>)> {
    let d = *x.shape.last().ok_or_else(|| Error::InvalidArgument("layer_norm on scalar".into()))?;
    if d == 0 || gain.shape != [d] || bias.shape != [d] {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: gain.shape.clone(),
        });
    }
    let rows = x.numel() / d;
    let dn = T::from_usize(d).unwrap();
    let (g, b) = (gain.data(), bias.data());
    let mut out = vec![T::zero(); x.numel()];
    let mut normalized = vec![T::zero(); x.numel()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let rstd = T::one() / (var + eps).sqrt();
        inv_std.push(rstd);
        for j in 0..d {
            let h = (row[j] - mean) * rstd;
            normalized[r * d + j] = h;
            out[r * d + j] = h * g[j] + b[j];
        }
    }
    Ok((
        Tensor::from_vec(x.shape.clone(), out),
        LayerNormSaved {
            normalized: Tensor::from_vec(x.shape.clone(), normalized),
            inv_std,
        },
    ))
}

/// Gradients of layer norm with respect to (x, gain, bias).
pub(crate) fn layer_norm_backward<T: Real>(
    saved: &LayerNormSaved<T>,
    gain: &Tensor<T>,
    gy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = gain.numel();
    let rows = gy.numel() / d;
    let dn = T::from_usize(d).unwrap();
    let (g, h, gyd) = (gain.data(), saved.normalized.data(), gy.data());
    let mut gx = vec![T::zero(); gy.numel()];
    let mut gg = vec![T::zero(); d];
    let mut gb = vec![T::zero(); d];
    for r in 0..rows {
        let (hr, gr) = (&h[r * d..(r + 1) * d], &gyd[r * d..(r + 1) * d]);
        let mut mean_gh = T::zero();
        let mut mean_ghh = T::zero();
        for j in 0..d {
            let gh = gr[j] * g[j];
            mean_gh += gh;
            mean_ghh += gh * hr[j];
            gg[j] += gr[j] * hr[j];
            gb[j] += gr[j];
        }
        mean_gh /= dn;
        mean_ghh /= dn;
        let rstd = saved.inv_std[r];
        for j in 0..d {
            gx[r * d + j] = rstd * (gr[j] * g[j] - mean_gh - hr[j] * mean_ghh);
        }
    }
    (
        Tensor::from_vec(gy.shape.clone(), gx),
        Tensor::from_vec(vec![d], gg),
        Tensor::from_vec(vec![d], gb),
    )
}

/// Exact GeLU, `0.5·x·(1 + erf(x/√2))`.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::from_f64c(0.5);
    half * x * (T::one() + (x * T::from_f64c(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let half = T::from_f64c(0.5);
    let cdf = half * (T::one() + (x * T::from_f64c(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::from_f64c(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// `out[.., i, j] = x[.., i, index[i·cols + j]]` for `x` of shape `[.., rows, width]`.
pub(crate) fn gather_last<T: Real>(
    x: &Tensor<T>,
    index: &[usize],
    cols: usize,
) -> Result<Tensor<T>> {
    let rank = x.rank();
    if rank < 2 {
        return Err(Error::InvalidArgument("gather_last needs rank ≥ 2".into()));
    }
    let (rows, width) = (x.shape[rank - 2], x.shape[rank - 1]);
    if index.len() != rows * cols || index.iter().any(|&i| i >= width) {
        return Err(Error::Shape {
            op: "gather_last",
            lhs: x.shape.clone(),
            rhs: vec![rows, cols],
        });
    }
    let batch = x.numel() / (rows * width).max(1);
    let xd = x.data();
    let mut out = Vec::with_capacity(batch * rows * cols);
    for bidx in 0..batch {
        for i in 0..rows {
            let row = &xd[(bidx * rows + i) * width..(bidx * rows + i + 1) * width];
            out.extend(index[i * cols..(i + 1) * cols].iter().map(|&c| row[c]));
        }
    }
    let mut shape = x.shape.clone();
    shape[rank - 1] = cols;
    Ok(Tensor::from_vec(shape, out))
}

/// Adjoint of [`gather_last`]: scatter-add `[.., rows, cols]` into `[.., rows, width]`.
pub(crate) fn scatter_last<T: Real>(
    x: &Tensor<T>,
    index: &[usize],
    width: usize,
) -> Result<Tensor<T>> {
    let rank = x.rank();
    if rank < 2 {
        return Err(Error::InvalidArgument("scatter_last needs rank ≥ 2".into()));
    }
    let (rows, cols) = (x.shape[rank - 2], x.shape[rank - 1]);
    if index.len() != rows * cols || index.iter().any(|&i| i >= width) {
        return Err(Error::Shape {
            op: "scatter_last",
            lhs: x.shape.clone(),
            rhs: vec![rows, width],
        });
    }
    let batch = x.numel() / (rows * cols).max(1);
    let xd = x.data();
    let mut out = vec![T::zero(); batch * rows * width];
    for bidx in 0..batch {
        for i in 0..rows {
            let src = &xd[(bidx * rows + i) * cols..(bidx * rows + i + 1) * cols];
            let dst = &mut out[(bidx * rows + i) * width..(bidx * rows + i + 1) * width];
            for (&c, &v) in index[i * cols..(i + 1) * cols].iter().zip(src) {
                dst[c] += v;
            }
        }
    }
    let mut shape = x.shape.clone();
    shape[rank - 1] = width;
    Ok(Tensor::from_vec(shape, out))
}
