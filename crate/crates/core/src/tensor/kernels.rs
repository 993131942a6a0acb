//! Forward kernels over plain [`Tensor`] values.
//!
//! Every reduction runs in a fixed sequential order so results are
//! bit-reproducible across runs.

use super::{axis_split, numel, Tensor};
use crate::error::{Error, Result};

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for t in 0..k {
        let arow = &a[t * m..(t + 1) * m];
        let brow = &b[t * n..(t + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// How the leading (batch) extents of two matmul operands line up.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct MatmulPlan {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub out_shape: Vec<usize>,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    let mismatch = || {
        Error::Dimension(format!(
            "matmul shape mismatch: left {a:?}, right {b:?}"
        ))
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    match (a_batch.is_empty(), b_batch.is_empty()) {
        (true, true) => Ok(MatmulPlan {
            batch: 1,
            m,
            k,
            n,
            a_batched: false,
            b_batched: false,
            out_shape: vec![m, n],
        }),
        // A batched left operand against a shared right matrix folds into one
        // tall product.
        (false, true) => {
            let mut out_shape = a_batch.to_vec();
            out_shape.extend([m, n]);
            Ok(MatmulPlan {
                batch: 1,
                m: numel(a_batch) * m,
                k,
                n,
                a_batched: false,
                b_batched: false,
                out_shape,
            })
        }
        (true, false) => {
            let mut out_shape = b_batch.to_vec();
            out_shape.extend([m, n]);
            Ok(MatmulPlan {
                batch: numel(b_batch),
                m,
                k,
                n,
                a_batched: false,
                b_batched: true,
                out_shape,
            })
        }
        (false, false) => {
            if a_batch != b_batch {
                return Err(mismatch());
            }
            let mut out_shape = a_batch.to_vec();
            out_shape.extend([m, n]);
            Ok(MatmulPlan {
                batch: numel(a_batch),
                m,
                k,
                n,
                a_batched: true,
                b_batched: true,
                out_shape,
            })
        }
    }
}

/// Matrix product `C[i][j] = Σ_t A[i][t]·B[t][j]` over the last two axes.
///
/// Leading axes are batch axes; they must agree, or one side may be a plain
/// matrix that is shared across the other side's batch.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let plan = matmul_plan(a.shape(), b.shape())?;
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut out = vec![0.0; plan.batch * m * n];
    for bi in 0..plan.batch {
        let ad = if plan.a_batched {
            &a.data()[bi * m * k..(bi + 1) * m * k]
        } else {
            a.data()
        };
        let bd = if plan.b_batched {
            &b.data()[bi * k * n..(bi + 1) * k * n]
        } else {
            b.data()
        };
        gemm_nn(ad, bd, &mut out[bi * m * n..(bi + 1) * m * n], m, k, n);
    }
    Tensor::new(&plan.out_shape, out)
}

/// Swaps the last two axes.
pub fn transpose_last(x: &Tensor) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 {
        return Err(Error::Dimension(format!(
            "transpose needs rank ≥ 2, got {:?}",
            x.shape()
        )));
    }
    let mut perm: Vec<usize> = (0..r).collect();
    perm.swap(r - 2, r - 1);
    permute(x, &perm)
}

pub fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let r = x.rank();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Dimension(format!(
            "invalid permutation {perm:?} for shape {:?}",
            x.shape()
        )));
    }
    let in_shape = x.shape();
    let mut in_strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = x.numel();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; r];
    let src = x.data();
    for _ in 0..total {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..r).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

fn check_axis(x: &Tensor, axis: usize, op: &str) -> Result<()> {
    if axis >= x.rank() {
        return Err(Error::Dimension(format!(
            "{op}: axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    if x.shape()[axis] == 0 {
        return Err(Error::Dimension(format!(
            "{op}: axis {axis} of shape {:?} is empty",
            x.shape()
        )));
    }
    Ok(())
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis(x, axis, "softmax")?;
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..len {
                max = max.max(src[at(a)]);
            }
            let mut sum = 0.0;
            for a in 0..len {
                let e = (src[at(a)] - max).exp();
                out[at(a)] = e;
                sum += e;
            }
            for a in 0..len {
                out[at(a)] /= sum;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Layer normalization over the last axis.
///
/// Returns `(output, normalized input, reciprocal std per row)`; the latter
/// two feed the backward rule.
pub fn layer_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::Dimension("layer_norm on a scalar".into()))?;
    if d == 0 || gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::Dimension(format!(
            "layer_norm: input {:?}, gamma {:?}, beta {:?}",
            x.shape(),
            gamma.shape(),
            beta.shape()
        )));
    }
    let rows = x.numel() / d;
    let mut xhat = vec![0.0; x.numel()];
    let mut rstd = vec![0.0; rows];
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[r * d + c] = h;
            out[r * d + c] = h * gamma.data()[c] + beta.data()[c];
        }
    }
    Ok((Tensor::new(x.shape(), out)?, xhat, rstd))
}

pub(crate) const L2_FLOOR: f64 = 1e-12;

/// Row-wise L2 normalization along the last axis; also returns the norms
/// (floored at a tiny constant so zero rows stay zero).
pub fn l2_normalize_last(x: &Tensor) -> (Tensor, Vec<f64>) {
    let d = *x.shape().last().unwrap_or(&1);
    let rows = if d == 0 { 0 } else { x.numel() / d };
    let mut out = vec![0.0; x.numel()];
    let mut norms = vec![0.0; rows];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_FLOOR);
        norms[r] = n;
        for c in 0..d {
            out[r * d + c] = row[c] / n;
        }
    }
    (Tensor::new(x.shape(), out).expect("same shape"), norms)
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Exact erf-based GELU.
pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v * INV_SQRT_2))
}

pub fn gelu_grad(v: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(v * INV_SQRT_2));
    let pdf = (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + v * pdf
}

/// `log Σ exp(x)` along the last axis restricted to entries where `mask` is
/// set. Every row must select at least one entry.
pub fn masked_logsumexp(x: &Tensor, mask: &[bool]) -> Result<Tensor> {
    if mask.len() != x.numel() || x.rank() == 0 {
        return Err(Error::Dimension(format!(
            "mask of {} entries for shape {:?}",
            mask.len(),
            x.shape()
        )));
    }
    let d = *x.shape().last().unwrap();
    let rows = x.numel() / d.max(1);
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let m = &mask[r * d..(r + 1) * d];
        let mut max = f64::NEG_INFINITY;
        for (v, &keep) in row.iter().zip(m) {
            if keep {
                max = max.max(*v);
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::Contract(format!("masked_logsumexp: row {r} selects nothing")));
        }
        let mut sum = 0.0;
        for (v, &keep) in row.iter().zip(m) {
            if keep {
                sum += (v - max).exp();
            }
        }
        out.push(max + sum.ln());
    }
    Tensor::new(&x.shape()[..x.rank() - 1], out)
}

pub fn sum_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::Dimension(format!(
            "sum: axis {axis} out of range for {:?}",
            x.shape()
        )));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for a in 0..len {
            let src = &x.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
            for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *dst += s;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Tensor::new(&shape, out)
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    if axis >= first.rank() {
        return Err(Error::Dimension(format!(
            "concat: axis {axis} out of range for {:?}",
            first.shape()
        )));
    }
    for p in parts {
        let ok = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::Dimension(format!(
                "concat along {axis}: {:?} vs {:?}",
                first.shape(),
                p.shape()
            )));
        }
    }
    let (outer, _, inner) = axis_split(first.shape(), axis);
    let total_len: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total_len * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total_len;
    Tensor::new(&shape, out)
}

pub fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.rank() || start + len > x.shape()[axis] {
        return Err(Error::Dimension(format!(
            "slice [{start}, {}) along axis {axis} of {:?}",
            start + len,
            x.shape()
        )));
    }
    let (outer, full, inner) = axis_split(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(&shape, out)
}
