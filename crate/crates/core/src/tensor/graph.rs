use std::rc::Rc;

use super::kernels::{self, gemm_nt, gemm_tn, matmul_plan};
use super::{axis_split, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    L2Normalize(Var, Vec<f64>),
    SumAll(Var),
    SumAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    MaskedLogSumExp(Var, Rc<Vec<bool>>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A tape of recorded operations in topological order.
///
/// Inputs always precede the node that consumes them. One call to
/// [`Graph::backward`] consumes the tape; a second call is rejected.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn suffix_of(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    let (ra, rb) = (a.rank(), b.rank());
    if rb > ra || a.shape()[ra - rb..] != *b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: {:?} does not broadcast against {:?}",
            b.shape(),
            a.shape()
        )));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("shape preserved")
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(Error::Dimension(format!(
                "transpose needs rank ≥ 2, got {:?}",
                self.shape(x)
            )));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = kernels::permute(self.value(x), perm)?;
        Ok(self.push(out, Op::Permute(x, perm.to_vec()), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        suffix_of("add_broadcast", av, bv)?;
        let bn = bv.numel().max(1);
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv.data()[i % bn])
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        Ok(self.push(out, Op::AddBcast(a, b), &[a, b]))
    }

    /// `a * b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        suffix_of("mul_broadcast", av, bv)?;
        let bn = bv.numel().max(1);
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * bv.data()[i % bn])
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        Ok(self.push(out, Op::MulBcast(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Validity("log of a non-positive value".into()));
        }
        let out = self.value(x).map(f64::ln);
        Ok(self.push(out, Op::Log(x), &[x]))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Validity("sqrt of a non-positive value".into()));
        }
        let out = self.value(x).map(f64::sqrt);
        Ok(self.push(out, Op::Sqrt(x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = kernels::softmax(self.value(x), axis)?;
        Ok(self.push(out, Op::Softmax(x, axis), &[x]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, xhat, rstd) =
            kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Unit L2 norm along the last axis.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let (out, norms) = kernels::l2_normalize_last(self.value(x));
        self.push(out, Op::L2Normalize(x, norms), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = kernels::sum_axis(self.value(x), axis)?;
        Ok(self.push(out, Op::SumAxis(x, axis), &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self
            .shape(x)
            .get(axis)
            .copied()
            .ok_or_else(|| Error::Dimension(format!("mean: axis {axis} out of range")))?;
        if n == 0 {
            return Err(Error::Dimension("mean over an empty axis".into()));
        }
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = kernels::concat(&values, axis)?;
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = kernels::slice(self.value(x), axis, start, len)?;
        Ok(self.push(out, Op::Slice(x, axis, start), &[x]))
    }

    /// `log Σ exp` over the masked entries of the last axis.
    pub fn masked_logsumexp(&mut self, x: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        let out = kernels::masked_logsumexp(self.value(x), &mask)?;
        Ok(self.push(out, Op::MaskedLogSumExp(x, mask), &[x]))
    }

    /// Reverse pass from a scalar. Returns `∂loss/∂leaf` for every leaf that
    /// was created with `requires_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Contract(
                "backward already ran on this graph; record a new one".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            for (input, g) in self.local_grads(idx, &gout)? {
                if input.0 >= idx {
                    return Err(Error::Internal(format!(
                        "graph order violated: node {idx} consumes node {}",
                        input.0
                    )));
                }
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    slot @ None => *slot = Some(g),
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.needs_grad) {
                grads[i] = None;
            } else if grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, idx: usize, gout: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let y = &node.value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let plan = matmul_plan(av.shape(), bv.shape())?;
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let mut out = Vec::with_capacity(2);
                if needs(*a) {
                    let mut da = vec![0.0; av.numel()];
                    for bi in 0..plan.batch {
                        let g = &gout.data()[bi * m * n..(bi + 1) * m * n];
                        let bd = if plan.b_batched {
                            &bv.data()[bi * k * n..(bi + 1) * k * n]
                        } else {
                            bv.data()
                        };
                        let dst = if plan.a_batched {
                            &mut da[bi * m * k..(bi + 1) * m * k]
                        } else {
                            &mut da[..]
                        };
                        gemm_nt(g, bd, dst, m, n, k);
                    }
                    out.push((*a, Tensor::new(av.shape(), da)?));
                }
                if needs(*b) {
                    let mut db = vec![0.0; bv.numel()];
                    for bi in 0..plan.batch {
                        let g = &gout.data()[bi * m * n..(bi + 1) * m * n];
                        let ad = if plan.a_batched {
                            &av.data()[bi * m * k..(bi + 1) * m * k]
                        } else {
                            av.data()
                        };
                        let dst = if plan.b_batched {
                            &mut db[bi * k * n..(bi + 1) * k * n]
                        } else {
                            &mut db[..]
                        };
                        gemm_tn(ad, g, dst, k, m, n);
                    }
                    out.push((*b, Tensor::new(bv.shape(), db)?));
                }
                out
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*x, kernels::permute(gout, &inv)?)]
            }
            Op::Reshape(x) => vec![(*x, gout.reshape(val(*x).shape())?)],
            Op::Add(a, b) => vec![(*a, gout.clone()), (*b, gout.clone())],
            Op::Sub(a, b) => vec![(*a, gout.clone()), (*b, gout.map(|v| -v))],
            Op::Mul(a, b) => vec![
                (*a, zip_map(gout, val(*b), |g, y| g * y)),
                (*b, zip_map(gout, val(*a), |g, x| g * x)),
            ],
            Op::AddBcast(a, b) => {
                let bv = val(*b);
                let bn = bv.numel().max(1);
                let mut db = vec![0.0; bv.numel()];
                for (i, g) in gout.data().iter().enumerate() {
                    db[i % bn] += g;
                }
                vec![(*a, gout.clone()), (*b, Tensor::new(bv.shape(), db)?)]
            }
            Op::MulBcast(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let bn = bv.numel().max(1);
                let mut da = vec![0.0; av.numel()];
                let mut db = vec![0.0; bv.numel()];
                for (i, g) in gout.data().iter().enumerate() {
                    da[i] = g * bv.data()[i % bn];
                    db[i % bn] += g * av.data()[i];
                }
                vec![
                    (*a, Tensor::new(av.shape(), da)?),
                    (*b, Tensor::new(bv.shape(), db)?),
                ]
            }
            Op::Scale(x, c) => vec![(*x, gout.map(|g| g * c))],
            Op::AddScalar(x) => vec![(*x, gout.clone())],
            Op::Gelu(x) => vec![(*x, zip_map(gout, val(*x), |g, v| g * kernels::gelu_grad(v)))],
            Op::Exp(x) => vec![(*x, zip_map(gout, y, |g, e| g * e))],
            Op::Log(x) => vec![(*x, zip_map(gout, val(*x), |g, v| g / v))],
            Op::Sqrt(x) => vec![(*x, zip_map(gout, y, |g, s| 0.5 * g / s))],
            Op::Relu(x) => vec![(
                *x,
                zip_map(gout, val(*x), |g, v| if v > 0.0 { g } else { 0.0 }),
            )],
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let mut dx = vec![0.0; y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot: f64 = (0..len).map(|a| gout.data()[at(a)] * y.data()[at(a)]).sum();
                        for a in 0..len {
                            dx[at(a)] = y.data()[at(a)] * (gout.data()[at(a)] - dot);
                        }
                    }
                }
                vec![(*x, Tensor::new(y.shape(), dx)?)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = val(*gamma);
                let d = gv.numel();
                let rows = rstd.len();
                let mut dx = vec![0.0; y.numel()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let g = &gout.data()[r * d..(r + 1) * d];
                    let h = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for c in 0..d {
                        dgamma[c] += g[c] * h[c];
                        dbeta[c] += g[c];
                        dxhat[c] = g[c] * gv.data()[c];
                        mean_dh += dxhat[c];
                        mean_dh_h += dxhat[c] * h[c];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for c in 0..d {
                        dx[r * d + c] = rstd[r] * (dxhat[c] - mean_dh - h[c] * mean_dh_h);
                    }
                }
                vec![
                    (*x, Tensor::new(y.shape(), dx)?),
                    (*gamma, Tensor::new(gv.shape(), dgamma)?),
                    (*beta, Tensor::new(gv.shape(), dbeta)?),
                ]
            }
            Op::L2Normalize(x, norms) => {
                let d = *y.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; y.numel()];
                for (r, &n) in norms.iter().enumerate() {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &gout.data()[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..d {
                        dx[r * d + c] = (gr[c] - yr[c] * dot) / n;
                    }
                }
                vec![(*x, Tensor::new(y.shape(), dx)?)]
            }
            Op::SumAll(x) => {
                let g = gout.data()[0];
                vec![(*x, Tensor::full(val(*x).shape(), g))]
            }
            Op::SumAxis(x, axis) => {
                let xs = val(*x).shape();
                let (outer, len, inner) = axis_split(xs, *axis);
                let mut dx = vec![0.0; val(*x).numel()];
                for o in 0..outer {
                    for a in 0..len {
                        let dst = &mut dx[(o * len + a) * inner..(o * len + a + 1) * inner];
                        dst.copy_from_slice(&gout.data()[o * inner..(o + 1) * inner]);
                    }
                }
                vec![(*x, Tensor::new(xs, dx)?)]
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let len = val(*p).shape()[*axis];
                    out.push((*p, kernels::slice(gout, *axis, start, len)?));
                    start += len;
                }
                out
            }
            Op::Slice(x, axis, start) => {
                let xs = val(*x).shape();
                let (outer, full, inner) = axis_split(xs, *axis);
                let len = gout.shape()[*axis];
                let mut dx = vec![0.0; val(*x).numel()];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&gout.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, Tensor::new(xs, dx)?)]
            }
            Op::MaskedLogSumExp(x, mask) => {
                let xv = val(*x);
                let d = *xv.shape().last().unwrap();
                let mut dx = vec![0.0; xv.numel()];
                for r in 0..y.numel() {
                    for c in 0..d {
                        let i = r * d + c;
                        if mask[i] {
                            dx[i] = gout.data()[r] * (xv.data()[i] - y.data()[r]).exp();
                        }
                    }
                }
                vec![(*x, Tensor::new(xv.shape(), dx)?)]
            }
        })
    }
}
