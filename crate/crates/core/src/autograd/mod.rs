//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Var`] is an immutable node of a dynamically built graph. Calling
//! [`Var::backward`] on a scalar returns the gradients of every leaf that
//! requires them. Nodes whose inputs are all constants carry no backward
//! closure, so inference graphs cost little more than the forward pass.

mod conv;
mod linalg;
mod norm;

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub use conv::{conv2d_forward, deform_sample_forward, DeformGeometry};
pub(crate) use linalg::gemm;

type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

/// Leaf gradients produced by [`Var::backward`].
#[derive(Default)]
pub struct Grads(HashMap<usize, Vec<f64>>);

impl Grads {
    pub fn get(&self, v: &Var) -> Option<&[f64]> {
        self.0.get(&v.key()).map(Vec::as_slice)
    }
}

impl Var {
    pub fn constant(value: Tensor) -> Self {
        Var(Rc::new(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        }))
    }

    /// A trainable leaf.
    pub fn leaf(value: Tensor) -> Self {
        Var(Rc::new(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        }))
    }

    pub(crate) fn from_op(
        value: Tensor,
        parents: Vec<Var>,
        backward: impl Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Self {
        if parents.iter().any(Var::requires_grad) {
            Var(Rc::new(Node {
                value,
                parents,
                backward: Some(Box::new(backward)),
                requires_grad: true,
            }))
        } else {
            Var::constant(value)
        }
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.0.value.data()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn detach(&self) -> Var {
        Var::constant(self.value().clone())
    }

    /// Back-propagates from this node, seeded with ones.
    pub fn backward(&self) -> Grads {
        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
        let mut leaves = Grads::default();
        pending.insert(self.key(), vec![1.0; self.value().numel()]);
        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.key()) else {
                continue;
            };
            let Some(back) = &node.0.backward else {
                if node.requires_grad() {
                    leaves.0.insert(node.key(), grad);
                }
                continue;
            };
            let needs: Vec<bool> = node.0.parents.iter().map(Var::requires_grad).collect();
            let parent_grads = back(&grad, &needs);
            for ((parent, g), need) in node.0.parents.iter().zip(parent_grads).zip(needs) {
                let (Some(g), true) = (g, need) else { continue };
                debug_assert_eq!(g.len(), parent.value().numel());
                match pending.get_mut(&parent.key()) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        pending.insert(parent.key(), g);
                    }
                }
            }
        }
        leaves
    }

    fn topo_order(&self) -> Vec<Var> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Var, bool)> = vec![(self.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                order.push(v);
                continue;
            }
            if !v.requires_grad() || !visited.insert(v.key()) {
                continue;
            }
            stack.push((v.clone(), true));
            for p in &v.0.parents {
                if p.requires_grad() && !visited.contains(&p.key()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    // ---- elementwise ----------------------------------------------------

    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let out = self.value().map(f);
        let x = self.clone();
        let y = out.data().to_vec();
        Var::from_op(out, vec![self.clone()], move |g, _| {
            let xs = x.data();
            vec![Some(
                g.iter()
                    .zip(xs)
                    .zip(&y)
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect(),
            )]
        })
    }

    pub fn scale(&self, c: f64) -> Var {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Var {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn abs(&self) -> Var {
        self.unary(f64::abs, |x, _| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
    }

    pub fn powf(&self, p: f64) -> Var {
        self.unary(move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    pub fn exp(&self) -> Var {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(&self) -> Var {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn silu(&self) -> Var {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var {
        const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        self.unary(
            |x| 0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let u = K * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = K * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            },
        )
    }

    fn binary(
        &self,
        other: &Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var> {
        let shape = broadcast_shape(self.shape(), other.shape(), op)?;
        let ia = broadcast_index(&shape, self.shape());
        let ib = broadcast_index(&shape, other.shape());
        let (a, b) = (self.data(), other.data());
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|i| f(a[ia.at(i)], b[ib.at(i)]))
            .collect();
        let out = Tensor::new(shape, data)?;
        let (va, vb) = (self.clone(), other.clone());
        Ok(Var::from_op(out, vec![self.clone(), other.clone()], move |g, needs| {
            let (a, b) = (va.data(), vb.data());
            let ga = needs[0].then(|| {
                let mut acc = vec![0.0; a.len()];
                for (i, &g) in g.iter().enumerate() {
                    let (ja, jb) = (ia.at(i), ib.at(i));
                    acc[ja] += g * da(a[ja], b[jb]);
                }
                acc
            });
            let gb = needs[1].then(|| {
                let mut acc = vec![0.0; b.len()];
                for (i, &g) in g.iter().enumerate() {
                    let (ja, jb) = (ia.at(i), ib.at(i));
                    acc[jb] += g * db(a[ja], b[jb]);
                }
                acc
            });
            vec![ga, gb]
        }))
    }

    /// Broadcasting addition (equal rank, size-1 axes broadcast).
    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary(other, "div", |a, b| a / b, |_, b| 1.0 / b, |a, b| -a / (b * b))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum_all(&self) -> Var {
        let n = self.value().numel();
        Var::from_op(Tensor::scalar(self.value().sum()), vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value().numel();
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Sums over axes so the result has `shape` (the inverse of broadcasting).
    pub fn sum_to(&self, shape: &[usize]) -> Result<Var> {
        if broadcast_shape(self.shape(), shape, "sum_to")? != self.shape() {
            return Err(Error::ShapeMismatch {
                op: "sum_to",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let idx = broadcast_index(self.shape(), shape);
        let mut out = vec![0.0; shape.iter().product()];
        for (i, &v) in self.data().iter().enumerate() {
            out[idx.at(i)] += v;
        }
        let n = self.value().numel();
        Ok(Var::from_op(
            Tensor::new(shape.to_vec(), out)?,
            vec![self.clone()],
            move |g, _| vec![Some((0..n).map(|i| g[idx.at(i)]).collect())],
        ))
    }

    // ---- shape & indexing -----------------------------------------------

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value().clone().reshape(shape)?;
        Ok(Var::from_op(out, vec![self.clone()], |g, _| vec![Some(g.to_vec())]))
    }

    /// `out[i] = self[index[i]]`; repeated indices accumulate in the backward pass.
    pub fn gather(&self, index: Rc<Vec<usize>>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != index.len() {
            return Err(invalid!("gather shape {:?} does not match {} indices", shape, index.len()));
        }
        let src = self.data();
        if let Some(&bad) = index.iter().find(|&&j| j >= src.len()) {
            return Err(invalid!("gather index {bad} out of range {}", src.len()));
        }
        let out = Tensor::new(shape, index.iter().map(|&j| src[j]).collect())?;
        let n = src.len();
        Ok(Var::from_op(out, vec![self.clone()], move |g, _| {
            let mut acc = vec![0.0; n];
            for (&j, &g) in index.iter().zip(g) {
                acc[j] += g;
            }
            vec![Some(acc)]
        }))
    }

    /// General axis permutation.
    pub fn permute(&self, axes: &[usize]) -> Result<Var> {
        let shape = self.shape();
        if axes.len() != shape.len() {
            return Err(invalid!("permute axes {:?} for shape {:?}", axes, shape));
        }
        let mut seen = vec![false; axes.len()];
        for &a in axes {
            if a >= axes.len() || std::mem::replace(&mut seen[a], true) {
                return Err(invalid!("permute axes {:?} are not a permutation", axes));
            }
        }
        let strides = strides(shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
        let index = index_from_strides(&out_shape, &out_strides);
        self.gather(Rc::new(index), out_shape)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(invalid!("narrow {axis}:{start}+{len} out of range for {:?}", shape));
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let strides = strides(shape);
        let offset = start * strides[axis];
        let index = index_from_strides(&out_shape, &strides)
            .into_iter()
            .map(|i| i + offset)
            .collect();
        self.gather(Rc::new(index), out_shape)
    }

    /// Concatenation along `axis`.
    pub fn cat(vars: &[Var], axis: usize) -> Result<Var> {
        let first = vars.first().ok_or_else(|| invalid!("cat of nothing"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(invalid!("cat axis {axis} for rank {rank}"));
        }
        for v in vars {
            let ok = v.shape().len() == rank
                && v.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "cat",
                    lhs: first.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = vars.iter().map(|v| v.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, &w) in vars.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = vars.iter().map(|v| v.shape()[axis]).sum();
        let out = Tensor::new(shape, data)?;
        Ok(Var::from_op(out, vars.to_vec(), move |g, needs| {
            let mut grads: Vec<Option<Vec<f64>>> = needs
                .iter()
                .zip(&widths)
                .map(|(&n, &w)| n.then(|| Vec::with_capacity(outer * w)))
                .collect();
            for o in 0..outer {
                let mut off = o * total;
                for (gr, &w) in grads.iter_mut().zip(&widths) {
                    if let Some(gr) = gr {
                        gr.extend_from_slice(&g[off..off + w]);
                    }
                    off += w;
                }
            }
            grads
        }))
    }

    /// Nearest-neighbour 2x spatial upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&self) -> Result<Var> {
        let (n, c, h, w) = self.value().dims4()?;
        let (ho, wo) = (2 * h, 2 * w);
        let mut index = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            for y in 0..ho {
                for x in 0..wo {
                    index.push(plane * h * w + (y / 2) * w + x / 2);
                }
            }
        }
        self.gather(Rc::new(index), [n, c, ho, wo])
    }

    /// 2x2 average pooling of `[N, C, H, W]` (even H and W).
    pub fn avg_pool2x(&self) -> Result<Var> {
        let (n, c, h, w) = self.value().dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid!("avg_pool2x needs even spatial dims, got {h}x{w}"));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.data();
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            for y in 0..ho {
                for xx in 0..wo {
                    let b = p * h * w + 2 * y * w + 2 * xx;
                    out[(p * ho + y) * wo + xx] = 0.25 * (x[b] + x[b + 1] + x[b + w] + x[b + w + 1]);
                }
            }
        }
        Ok(Var::from_op(
            Tensor::new([n, c, ho, wo], out)?,
            vec![self.clone()],
            move |g, _| {
                let mut gx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let v = 0.25 * g[(p * ho + y) * wo + xx];
                            let b = p * h * w + 2 * y * w + 2 * xx;
                            gx[b] += v;
                            gx[b + 1] += v;
                            gx[b + w] += v;
                            gx[b + w + 1] += v;
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Flat source index for every element of `shape` visited in row-major order.
fn index_from_strides(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut counter = vec![0usize; shape.len()];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(offset);
        for d in (0..shape.len()).rev() {
            counter[d] += 1;
            offset += strides[d];
            if counter[d] < shape[d] {
                break;
            }
            offset -= strides[d] * shape[d];
            counter[d] = 0;
        }
    }
    out
}

fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    let mismatch = || Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() != b.len() {
        return Err(mismatch());
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(mismatch()),
        })
        .collect()
}

/// Maps output element positions to source positions under broadcasting.
enum BroadcastIndex {
    Identity,
    Map(Rc<Vec<usize>>),
}

impl BroadcastIndex {
    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            BroadcastIndex::Identity => i,
            BroadcastIndex::Map(m) => m[i],
        }
    }
}

fn broadcast_index(out: &[usize], src: &[usize]) -> BroadcastIndex {
    if out == src {
        return BroadcastIndex::Identity;
    }
    let s = strides(src);
    let eff: Vec<usize> = src.iter().zip(&s).map(|(&d, &st)| if d == 1 { 0 } else { st }).collect();
    BroadcastIndex::Map(Rc::new(index_from_strides(out, &eff)))
}

#[cfg(test)]
mod tests;
