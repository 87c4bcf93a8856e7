//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only node list; every node only references nodes
//! with smaller ids, so a single reverse sweep visits them in topological
//! order. Gradients are accumulated in that fixed order, which makes the
//! result deterministic.

use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{conv2d_backward, conv2d_forward, Padding, Tensor};

/// A fixed linear map with a known adjoint, usable as a graph node.
///
/// Inputs and outputs are flat buffers; `in_shape`/`out_shape` only describe
/// how they are presented to the rest of the graph.
pub trait LinearMap<T: Scalar>: Send + Sync {
    fn in_shape(&self) -> Vec<usize>;
    fn out_shape(&self) -> Vec<usize>;
    fn apply(&self, x: &[T]) -> Vec<T>;
    fn apply_adjoint(&self, y: &[T]) -> Vec<T>;

    fn name(&self) -> &'static str {
        "linear"
    }
}

/// Identifier of a node inside a [`Graph`].
pub type NodeId = usize;

#[derive(Clone)]
enum Op<T: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    MatMul(NodeId, NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, T),
    Abs(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    Concat(Vec<NodeId>),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        pad: Padding,
        flip: bool,
    },
    Linear(NodeId, Arc<dyn LinearMap<T>>),
    Adjoint(NodeId, Arc<dyn LinearMap<T>>),
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Abs(_) => "abs",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::Concat(_) => "concat",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear(_, m) => m.name(),
            Op::Adjoint(_, m) => m.name(),
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Append-only computation graph. Not shared across threads: build one per
/// training item or evaluation.
pub struct Graph<T: Scalar = f64> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.len()).finish()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar = f64> {
    graph: &'g Graph<T>,
    id: NodeId,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

/// Gradients for an ordered list of leaves, one entry per requested leaf.
#[derive(Clone, Debug)]
pub struct GradientMap<T: Scalar = f64> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> GradientMap<T> {
    pub fn get(&self, index: usize) -> Result<&Tensor<T>> {
        self.grads
            .get(index)
            .and_then(Option::as_ref)
            .ok_or(Error::MissingGradient(index))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn into_vec(self) -> Result<Vec<Tensor<T>>> {
        self.grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.ok_or(Error::MissingGradient(i)))
            .collect()
    }
}

fn broadcast_pair<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if b.is_scalar() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

fn binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, shape: Vec<usize>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let (sa, sb) = (a.is_scalar() && a.len() != n, b.is_scalar() && b.len() != n);
    let (da, db) = (a.data(), b.data());
    let data = (0..n)
        .map(|i| f(da[if sa { 0 } else { i }], db[if sb { 0 } else { i }]))
        .collect();
    Tensor::new(shape, data).expect("broadcast shape")
}

/// Reduces a broadcast gradient back to the operand's shape.
fn unbroadcast<T: Scalar>(grad: Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    if grad.shape() == target.shape() {
        grad
    } else {
        Tensor::new(target.shape().to_vec(), vec![grad.sum()]).expect("scalar")
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf whose gradient can be requested from [`Graph::backward`].
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].tracked
    }

    fn with_value<R>(&self, id: NodeId, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    /// Op name and id of the first node holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(NodeId, &'static str)> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Exact reverse-mode gradients of the scalar `loss` with respect to `wrt`.
    pub fn backward(&self, loss: Var<'_, T>, wrt: &[Var<'_, T>]) -> Result<GradientMap<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::new(root.value.shape().to_vec(), vec![T::one()])?);

        fn acc<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
            match slot {
                Some(existing) => existing.axpy(T::one(), &g).expect("gradient shape"),
                None => *slot = Some(g),
            }
        }

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let val = |k: NodeId| &nodes[k].value;
            let want = |k: NodeId| nodes[k].tracked;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                    if want(*a) {
                        acc(&mut grads[*a], unbroadcast(g.clone(), val(*a)));
                    }
                    if want(*b) {
                        acc(&mut grads[*b], unbroadcast(g.scale(sign), val(*b)));
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if want(*a) {
                        let ga = binary(&g, vb, g.shape().to_vec(), |x, y| x * y);
                        acc(&mut grads[*a], unbroadcast(ga, va));
                    }
                    if want(*b) {
                        let gb = binary(&g, va, g.shape().to_vec(), |x, y| x * y);
                        acc(&mut grads[*b], unbroadcast(gb, vb));
                    }
                }
                Op::Scale(a, c) => acc(&mut grads[*a], g.scale(*c)),
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if want(*a) {
                        acc(&mut grads[*a], g.matmul(&vb.transpose()?)?);
                    }
                    if want(*b) {
                        acc(&mut grads[*b], va.transpose()?.matmul(&g)?);
                    }
                }
                Op::Relu(a) => {
                    let x = val(*a);
                    let ga = binary(&g, x, g.shape().to_vec(), |d, x| if x > T::zero() { d } else { T::zero() });
                    acc(&mut grads[*a], ga);
                }
                Op::LeakyRelu(a, slope) => {
                    let s = *slope;
                    let x = val(*a);
                    let ga = binary(&g, x, g.shape().to_vec(), |d, x| if x > T::zero() { d } else { d * s });
                    acc(&mut grads[*a], ga);
                }
                Op::Abs(a) => {
                    let x = val(*a);
                    let ga = binary(&g, x, g.shape().to_vec(), |d, x| {
                        if x > T::zero() {
                            d
                        } else if x < T::zero() {
                            -d
                        } else {
                            T::zero()
                        }
                    });
                    acc(&mut grads[*a], ga);
                }
                Op::Square(a) => {
                    let x = val(*a);
                    let two = T::lit(2.0);
                    acc(&mut grads[*a], binary(&g, x, g.shape().to_vec(), |d, x| two * d * x));
                }
                Op::Sum(a) => {
                    acc(&mut grads[*a], Tensor::full(val(*a).shape(), g.item()));
                }
                Op::Mean(a) => {
                    let x = val(*a);
                    let c = g.item() / T::lit(x.len() as f64);
                    acc(&mut grads[*a], Tensor::full(x.shape(), c));
                }
                Op::Reshape(a) => {
                    let ga = g.into_reshape(val(*a).shape())?;
                    acc(&mut grads[*a], ga);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let v = val(p);
                        let n = v.len();
                        if want(p) {
                            let slice = g.data()[offset..offset + n].to_vec();
                            acc(&mut grads[p], Tensor::new(v.shape().to_vec(), slice)?);
                        }
                        offset += n;
                    }
                }
                Op::Conv2d {
                    input,
                    kernel,
                    pad,
                    flip,
                } => {
                    let (gi, gk) = conv2d_backward(
                        val(*input),
                        val(*kernel),
                        g.data(),
                        *pad,
                        *flip,
                        want(*input),
                        want(*kernel),
                    );
                    if let Some(gi) = gi {
                        acc(&mut grads[*input], gi);
                    }
                    if let Some(gk) = gk {
                        acc(&mut grads[*kernel], gk);
                    }
                }
                Op::Linear(a, map) => {
                    let ga = map.apply_adjoint(g.data());
                    acc(&mut grads[*a], Tensor::new(val(*a).shape().to_vec(), ga)?);
                }
                Op::Adjoint(a, map) => {
                    let ga = map.apply(g.data());
                    acc(&mut grads[*a], Tensor::new(val(*a).shape().to_vec(), ga)?);
                }
            }
        }

        let out = wrt
            .iter()
            .map(|v| {
                if v.id > loss.id || !nodes[v.id].tracked {
                    // Leaf created after the loss or a constant: no dependence.
                    Some(Tensor::zeros(nodes[v.id].value.shape()))
                } else {
                    Some(
                        grads[v.id]
                            .take()
                            .unwrap_or_else(|| Tensor::zeros(nodes[v.id].value.shape())),
                    )
                }
            })
            .collect();
        Ok(GradientMap { grads: out })
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Tensor<T> {
        self.graph.with_value(self.id, Tensor::clone)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.with_value(self.id, |t| t.shape().to_vec())
    }

    pub fn len(&self) -> usize {
        self.graph.with_value(self.id, Tensor::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn tracked_any(&self, others: &[&Var<'g, T>]) -> bool {
        self.graph.tracked(self.id) || others.iter().any(|o| self.graph.tracked(o.id))
    }

    fn unary(&self, op: Op<T>, f: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>) -> Result<Var<'g, T>> {
        let value = self.graph.with_value(self.id, f)?;
        Ok(self.graph.push(value, op, self.graph.tracked(self.id)))
    }

    fn elementwise(
        &self,
        other: &Var<'g, T>,
        name: &'static str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var<'g, T>> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let shape = broadcast_pair(name, a, b)?;
            binary(a, b, shape, f)
        };
        Ok(self.graph.push(value, op, self.tracked_any(&[other])))
    }

    pub fn add(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.elementwise(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.elementwise(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Elementwise product; one operand may be a single-element tensor.
    pub fn mul(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.elementwise(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Result<Var<'g, T>> {
        self.unary(Op::Scale(self.id, c), |t| Ok(t.scale(c)))
    }

    pub fn matmul(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            nodes[self.id].value.matmul(&nodes[other.id].value)?
        };
        Ok(self
            .graph
            .push(value, Op::MatMul(self.id, other.id), self.tracked_any(&[other])))
    }

    pub fn relu(&self) -> Result<Var<'g, T>> {
        self.unary(Op::Relu(self.id), |t| Ok(t.map(|x| x.max(T::zero()))))
    }

    /// `max(slope * x, x)` for `0 < slope < 1`.
    pub fn leaky_relu(&self, slope: T) -> Result<Var<'g, T>> {
        self.unary(Op::LeakyRelu(self.id, slope), |t| {
            Ok(t.map(|x| if x > T::zero() { x } else { slope * x }))
        })
    }

    pub fn abs(&self) -> Result<Var<'g, T>> {
        self.unary(Op::Abs(self.id), |t| Ok(t.map(T::abs)))
    }

    pub fn square(&self) -> Result<Var<'g, T>> {
        self.unary(Op::Square(self.id), |t| Ok(t.map(|x| x * x)))
    }

    pub fn sum(&self) -> Result<Var<'g, T>> {
        self.unary(Op::Sum(self.id), |t| Ok(Tensor::scalar(t.sum())))
    }

    pub fn mean(&self) -> Result<Var<'g, T>> {
        self.unary(Op::Mean(self.id), |t| {
            if t.is_empty() {
                return Err(Error::InvalidArgument("mean of an empty tensor".into()));
            }
            Ok(Tensor::scalar(t.sum() / T::lit(t.len() as f64)))
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        self.unary(Op::Reshape(self.id), |t| t.reshape(shape))
    }

    /// Concatenation along the leading axis.
    pub fn concat(parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let Some(first) = parts.first() else {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        };
        let graph = first.graph;
        let value = {
            let nodes = graph.nodes.borrow();
            let tail = nodes[first.id].value.shape()[1..].to_vec();
            let mut lead = 0;
            let mut data = Vec::new();
            for p in parts {
                let v = &nodes[p.id].value;
                if v.shape().len() != tail.len() + 1 || v.shape()[1..] != tail[..] {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        left: nodes[first.id].value.shape().to_vec(),
                        right: v.shape().to_vec(),
                    });
                }
                lead += v.shape()[0];
                data.extend_from_slice(v.data());
            }
            let mut shape = vec![lead];
            shape.extend(tail);
            Tensor::new(shape, data)?
        };
        let tracked = parts.iter().any(|p| graph.tracked(p.id));
        Ok(graph.push(value, Op::Concat(parts.iter().map(|p| p.id).collect()), tracked))
    }

    /// True convolution, see [`Tensor::conv2d`].
    pub fn conv2d(&self, kernel: &Var<'g, T>, pad: Padding) -> Result<Var<'g, T>> {
        self.conv_impl(kernel, pad, true)
    }

    pub fn cross_correlate2d(&self, kernel: &Var<'g, T>, pad: Padding) -> Result<Var<'g, T>> {
        self.conv_impl(kernel, pad, false)
    }

    fn conv_impl(&self, kernel: &Var<'g, T>, pad: Padding, flip: bool) -> Result<Var<'g, T>> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            conv2d_forward(&nodes[self.id].value, &nodes[kernel.id].value, pad, flip)?
        };
        Ok(self.graph.push(
            value,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                pad,
                flip,
            },
            self.tracked_any(&[kernel]),
        ))
    }

    /// Applies a fixed linear map; its adjoint is used for the backward pass.
    pub fn linear(&self, map: Arc<dyn LinearMap<T>>) -> Result<Var<'g, T>> {
        let out_shape = map.out_shape();
        let m2 = map.clone();
        self.unary(Op::Linear(self.id, map), move |t| {
            check_len("linear", t, &m2.in_shape())?;
            Tensor::new(out_shape, m2.apply(t.data()))
        })
    }

    /// Applies the adjoint of a fixed linear map.
    pub fn linear_adjoint(&self, map: Arc<dyn LinearMap<T>>) -> Result<Var<'g, T>> {
        let in_shape = map.in_shape();
        let m2 = map.clone();
        self.unary(Op::Adjoint(self.id, map), move |t| {
            check_len("linear_adjoint", t, &m2.out_shape())?;
            Tensor::new(in_shape, m2.apply_adjoint(t.data()))
        })
    }

    /// `relu(x - t) - relu(-x - t)`, the soft-thresholding map.
    pub fn soft_threshold(&self, threshold: T) -> Result<Var<'g, T>> {
        let t = self.graph.constant(Tensor::scalar(threshold));
        let pos = self.sub(&t)?.relu()?;
        let neg = self.scale(-T::one())?.sub(&t)?.relu()?;
        pos.sub(&neg)
    }
}

fn check_len<T: Scalar>(op: &'static str, t: &Tensor<T>, expected: &[usize]) -> Result<()> {
    let n: usize = expected.iter().product();
    if t.len() != n {
        return Err(Error::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: expected.to_vec(),
        });
    }
    Ok(())
}

/// Dense matrix wrapped as a [`LinearMap`].
pub struct MatrixMap<T: Scalar> {
    matrix: Tensor<T>,
    transposed: Tensor<T>,
}

impl<T: Scalar> MatrixMap<T> {
    pub fn new(matrix: Tensor<T>) -> Result<Self> {
        let transposed = matrix.transpose()?;
        Ok(Self { matrix, transposed })
    }
}

impl<T: Scalar> LinearMap<T> for MatrixMap<T> {
    fn in_shape(&self) -> Vec<usize> {
        vec![self.matrix.shape()[1]]
    }
    fn out_shape(&self) -> Vec<usize> {
        vec![self.matrix.shape()[0]]
    }
    fn apply(&self, x: &[T]) -> Vec<T> {
        self.matrix.matvec(x).expect("length checked by graph")
    }
    fn apply_adjoint(&self, y: &[T]) -> Vec<T> {
        self.transposed.matvec(y).expect("length checked by graph")
    }
    fn name(&self) -> &'static str {
        "matrix"
    }
}

/// Gather map `out[i] = x[index[i]]`; its adjoint scatters-adds.
pub struct GatherMap {
    index: Vec<usize>,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
}

impl GatherMap {
    pub fn new(index: Vec<usize>, in_shape: Vec<usize>, out_shape: Vec<usize>) -> Result<Self> {
        let n_in: usize = in_shape.iter().product();
        let n_out: usize = out_shape.iter().product();
        if index.len() != n_out || index.iter().any(|&i| i >= n_in) {
            return Err(Error::InvalidArgument("gather index does not fit shapes".into()));
        }
        Ok(Self {
            index,
            in_shape,
            out_shape,
        })
    }
}

impl<T: Scalar> LinearMap<T> for GatherMap {
    fn in_shape(&self) -> Vec<usize> {
        self.in_shape.clone()
    }
    fn out_shape(&self) -> Vec<usize> {
        self.out_shape.clone()
    }
    fn apply(&self, x: &[T]) -> Vec<T> {
        self.index.iter().map(|&i| x[i]).collect()
    }
    fn apply_adjoint(&self, y: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.in_shape.iter().product()];
        for (&i, &v) in self.index.iter().zip(y) {
            out[i] += v;
        }
        out
    }
    fn name(&self) -> &'static str {
        "gather"
    }
}
