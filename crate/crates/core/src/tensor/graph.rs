use std::cell::{Cell, RefCell};
use std::sync::Arc;

use rand::Rng;

use super::kernels::{self, LayerNormSaved};
use super::{Real, Tensor};
use crate::error::{Error, Result};

type NodeId = usize;

enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_a: bool,
        trans_b: bool,
    },
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Softmax(NodeId, usize),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        saved: LayerNormSaved<T>,
    },
    Gelu(NodeId),
    /// Elementwise product with a constant (dropout masks).
    MulConst(NodeId, Tensor<T>),
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        smoothing: T,
        pad_id: usize,
        probs: Vec<T>,
        count: usize,
    },
    GatherLast {
        x: NodeId,
        index: Arc<Vec<usize>>,
        width: usize,
    },
    ScatterLast {
        x: NodeId,
        index: Arc<Vec<usize>>,
        cols: usize,
    },
    Sum(NodeId),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The operation tape. Nodes are appended in evaluation order, which is a
/// topological order, so the backward pass is a single reverse sweep.
pub struct Graph<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real = f32> {
    graph: &'g Graph<T>,
    id: NodeId,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf; its gradient is reported by [`Graph::backward`].
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: NodeId) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode sweep from a scalar `loss`. The tape can be swept once.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.graph, self) {
            return Err(Error::InvalidArgument("loss belongs to another graph".into()));
        }
        if self.consumed.replace(true) {
            return Err(Error::InvalidArgument("tape already consumed by backward".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Shape {
                op: "backward (loss must be scalar)",
                lhs: root.value.shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        let mut leaves = vec![None; nodes.len()];

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut send = |to: NodeId, t: Tensor<T>| {
                if !nodes[to].requires_grad {
                    return;
                }
                match &mut grads[to] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += *b;
                        }
                    }
                    slot => *slot = Some(t),
                }
            };
            let val = |i: NodeId| &nodes[i].value;
            match &node.op {
                Op::Leaf => leaves[id] = Some(g),
                Op::Add(a, b) => {
                    send(*a, kernels::reduce_to_shape(&g, val(*a).shape()));
                    send(*b, kernels::reduce_to_shape(&g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    send(*a, kernels::reduce_to_shape(&g, val(*a).shape()));
                    let neg = g.map(|v| -v);
                    send(*b, kernels::reduce_to_shape(&neg, val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    if nodes[*a].requires_grad {
                        let ga = kernels::binary(&g, val(*b), |x, y| x * y)?;
                        send(*a, kernels::reduce_to_shape(&ga, val(*a).shape()));
                    }
                    if nodes[*b].requires_grad {
                        let gb = kernels::binary(&g, val(*a), |x, y| x * y)?;
                        send(*b, kernels::reduce_to_shape(&gb, val(*b).shape()));
                    }
                }
                Op::Scale(a, c) => send(*a, g.map(|v| v * *c)),
                Op::MatMul {
                    a,
                    b,
                    trans_a,
                    trans_b,
                } => {
                    let (av, bv) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        let ga = if *trans_a {
                            kernels::matmul(bv, *trans_b, &g, true)?
                        } else {
                            kernels::matmul(&g, false, bv, !*trans_b)?
                        };
                        send(*a, kernels::reduce_to_shape(&ga, av.shape()));
                    }
                    if nodes[*b].requires_grad {
                        let gb = matmul_rhs_grad(av, *trans_a, &g, *trans_b, bv.shape())?;
                        send(*b, gb);
                    }
                }
                Op::Reshape(a) => send(*a, g.reshape(val(*a).shape())?),
                Op::Permute(a, perm) => {
                    send(*a, kernels::permute(&g, &kernels::inverse_permutation(perm))?)
                }
                Op::Softmax(a, axis) => send(*a, kernels::softmax_backward(&node.value, &g, *axis)),
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    saved,
                } => {
                    let (gx, gg, gb) = kernels::layer_norm_backward(saved, val(*gain), &g);
                    send(*x, gx);
                    send(*gain, gg);
                    send(*bias, gb);
                }
                Op::Gelu(a) => {
                    let gx = kernels::binary(&g, val(*a), |gv, x| gv * kernels::gelu_grad_scalar(x))?;
                    send(*a, gx);
                }
                Op::MulConst(a, mask) => send(*a, kernels::binary(&g, mask, |x, m| x * m)?),
                Op::Embedding { table, ids } => {
                    let tv = val(*table);
                    let d = tv.shape()[1];
                    let mut gt = vec![T::zero(); tv.numel()];
                    for (row, &id) in g.data().chunks(d).zip(ids) {
                        for (acc, &v) in gt[id * d..(id + 1) * d].iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    send(*table, Tensor::from_vec(tv.shape().to_vec(), gt));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    smoothing,
                    pad_id,
                    probs,
                    count,
                } => {
                    let lv = val(*logits);
                    let v = lv.shape()[1];
                    let scale = g.item() / T::from_usize(*count).unwrap();
                    let (on, off) = smoothing_weights(*smoothing, v);
                    let mut gl = vec![T::zero(); lv.numel()];
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad_id {
                            continue;
                        }
                        for c in 0..v {
                            let q = if c == t { on } else { off };
                            gl[r * v + c] = (probs[r * v + c] - q) * scale;
                        }
                    }
                    send(*logits, Tensor::from_vec(lv.shape().to_vec(), gl));
                }
                Op::GatherLast { x, index, width } => {
                    send(*x, kernels::scatter_last(&g, index, *width)?)
                }
                Op::ScatterLast { x, index, cols } => {
                    send(*x, kernels::gather_last(&g, index, *cols)?)
                }
                Op::Sum(a) => send(*a, Tensor::full(val(*a).shape(), g.item())),
            }
        }
        Ok(Gradients { by_node: leaves })
    }
}

/// Gradient of `op(a)·op(b)` with respect to the stored `b`.
fn matmul_rhs_grad<T: Real>(
    a: &Tensor<T>,
    trans_a: bool,
    g: &Tensor<T>,
    trans_b: bool,
    b_shape: &[usize],
) -> Result<Tensor<T>> {
    if b_shape.len() == 2 && !trans_a && a.rank() > 2 {
        // Shared weight: fold the batch into rows and do one product.
        let k = a.shape()[a.rank() - 1];
        let n = g.shape()[g.rank() - 1];
        let a2 = a.reshape(&[a.numel() / k, k])?;
        let g2 = g.reshape(&[g.numel() / n, n])?;
        return if trans_b {
            kernels::matmul(&g2, true, &a2, false)
        } else {
            kernels::matmul(&a2, true, &g2, false)
        };
    }
    let gb = if trans_b {
        kernels::matmul(g, true, a, trans_a)?
    } else {
        kernels::matmul(a, !trans_a, g, false)?
    };
    Ok(kernels::reduce_to_shape(&gb, b_shape))
}

/// (target weight, per-other-class weight) of the smoothed distribution.
fn smoothing_weights<T: Real>(smoothing: T, classes: usize) -> (T, T) {
    if classes <= 1 {
        return (T::one(), T::zero());
    }
    (
        T::one() - smoothing,
        smoothing / T::from_usize(classes - 1).unwrap(),
    )
}

/// Leaf gradients produced by one backward sweep.
pub struct Gradients<T: Real = f32> {
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a trainable leaf; `None` if it did not influence the loss.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_node.get(var.id).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but yields zeros for an unused leaf.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape().as_slice()))
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn value(&self) -> Tensor<T> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    fn same_graph(&self, other: &Var<'g, T>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(Error::InvalidArgument("operands belong to different graphs".into()))
        }
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        let rg = self.graph.requires(self.id);
        self.graph.push(value, op, rg)
    }

    fn binary_node(&self, other: &Var<'g, T>, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        let rg = self.graph.requires(self.id) || self.graph.requires(other.id);
        self.graph.push(value, op, rg)
    }

    /// Broadcasting addition.
    pub fn add(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(other)?;
        let v = kernels::binary(&self.value(), &other.value(), |a, b| a + b)?;
        Ok(self.binary_node(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(other)?;
        let v = kernels::binary(&self.value(), &other.value(), |a, b| a - b)?;
        Ok(self.binary_node(other, v, Op::Sub(self.id, other.id)))
    }

    /// Broadcasting elementwise product.
    pub fn mul(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(other)?;
        let v = kernels::binary(&self.value(), &other.value(), |a, b| a * b)?;
        Ok(self.binary_node(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, c: T) -> Var<'g, T> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    /// Batched matrix product over the trailing two axes.
    pub fn matmul(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.matmul_ex(other, false, false)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.matmul_ex(other, false, true)
    }

    pub fn matmul_ex(&self, other: &Var<'g, T>, trans_a: bool, trans_b: bool) -> Result<Var<'g, T>> {
        self.same_graph(other)?;
        let v = kernels::matmul(&self.value(), trans_a, &other.value(), trans_b)?;
        Ok(self.binary_node(
            other,
            v,
            Op::MatMul {
                a: self.id,
                b: other.id,
                trans_a,
                trans_b,
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'g, T>> {
        let v = kernels::permute(&self.value(), perm)?;
        Ok(self.unary(v, Op::Permute(self.id, perm.to_vec())))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        if axis >= x.rank() || x.shape()[axis] == 0 {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} for shape {:?}",
                x.shape()
            )));
        }
        let v = kernels::softmax(&x, axis);
        Ok(self.unary(v, Op::Softmax(self.id, axis)))
    }

    /// Layer normalization over the last axis (biased variance).
    pub fn layer_norm(&self, gain: &Var<'g, T>, bias: &Var<'g, T>, eps: T) -> Result<Var<'g, T>> {
        self.same_graph(gain)?;
        self.same_graph(bias)?;
        let (v, saved) = kernels::layer_norm(&self.value(), &gain.value(), &bias.value(), eps)?;
        let rg = [self.id, gain.id, bias.id]
            .iter()
            .any(|&i| self.graph.requires(i));
        Ok(self.graph.push(
            v,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                saved,
            },
            rg,
        ))
    }

    pub fn gelu(&self) -> Var<'g, T> {
        let v = self.value().map(kernels::gelu_scalar);
        self.unary(v, Op::Gelu(self.id))
    }

    /// Inverted dropout. Identity when not training or `p == 0`.
    pub fn dropout<R: Rng>(&self, p: f64, training: bool, rng: &mut R) -> Result<Var<'g, T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(*self);
        }
        let x = self.value();
        let keep = T::from_f64c(1.0 / (1.0 - p));
        let mask = Tensor::from_fn(x.shape(), |_| {
            if rng.gen::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        });
        let v = kernels::binary(&x, &mask, |a, m| a * m)?;
        Ok(self.unary(v, Op::MulConst(self.id, mask)))
    }

    /// Row lookup into a `[vocab, d]` table; output is `[ids.len(), d]`.
    pub fn embedding(&self, ids: &[usize]) -> Result<Var<'g, T>> {
        let table = self.value();
        if table.rank() != 2 {
            return Err(Error::Shape {
                op: "embedding",
                lhs: table.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (vocab, d) = (table.shape()[0], table.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::InvalidArgument(format!(
                    "token id {id} outside vocabulary of {vocab}"
                )));
            }
            data.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
        }
        let v = Tensor::from_vec(vec![ids.len(), d], data);
        Ok(self.unary(
            v,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Label-smoothed cross entropy of `[rows, classes]` logits, averaged over
    /// the rows whose target is not `pad_id`.
    pub fn cross_entropy(&self, targets: &[usize], smoothing: f64, pad_id: usize) -> Result<Var<'g, T>> {
        let logits = self.value();
        if logits.rank() != 2 || logits.shape()[0] != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: logits.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let v = logits.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::InvalidArgument(format!(
                "target {bad} outside {v} classes"
            )));
        }
        let count = targets.iter().filter(|&&t| t != pad_id).count();
        if count == 0 {
            return Err(Error::InvalidArgument(
                "cross entropy over an empty (all padding) target set".into(),
            ));
        }
        let smoothing = T::from_f64c(smoothing);
        let (on, off) = smoothing_weights(smoothing, v);
        let logp = kernels::log_softmax_rows(logits.data(), v);
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t == pad_id {
                continue;
            }
            let row = &logp[r * v..(r + 1) * v];
            let mut loss = T::zero();
            for (c, &lp) in row.iter().enumerate() {
                let q = if c == t { on } else { off };
                if q != T::zero() {
                    loss -= q * lp;
                }
            }
            total += loss;
        }
        let probs = logp.iter().map(|&l| l.exp()).collect();
        let value = Tensor::scalar(total / T::from_usize(count).unwrap());
        Ok(self.unary(
            value,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                smoothing,
                pad_id,
                probs,
                count,
            },
        ))
    }

    /// `out[.., i, j] = self[.., i, index[i·cols + j]]`.
    pub fn gather_last(&self, index: Arc<Vec<usize>>, cols: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let width = *x.shape().last().unwrap_or(&0);
        let v = kernels::gather_last(&x, &index, cols)?;
        Ok(self.unary(
            v,
            Op::GatherLast {
                x: self.id,
                index,
                width,
            },
        ))
    }

    /// Adjoint of [`Var::gather_last`]: sums columns that share an index.
    pub fn scatter_last(&self, index: Arc<Vec<usize>>, width: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let cols = *x.shape().last().unwrap_or(&0);
        let v = kernels::scatter_last(&x, &index, width)?;
        Ok(self.unary(
            v,
            Op::ScatterLast {
                x: self.id,
                index,
                cols,
            },
        ))
    }

    pub fn sum(&self) -> Var<'g, T> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::new(&[3], vec![1.0, -2.0, 5.0]).unwrap());
        let loss = x.sum();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_square_gives_identity() {
        let g = Graph::<f64>::new();
        let xv = Tensor::new(&[4], vec![0.5, -1.5, 2.0, 0.0]).unwrap();
        let x = g.param(xv.clone());
        let loss = x.mul(&x).unwrap().sum().scale(0.5);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &xv);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let g = Graph::<f32>::new();
        let x = g.param(Tensor::ones(&[2]));
        assert!(g.backward(x).is_err());
        let g = Graph::<f32>::new();
        let x = g.param(Tensor::ones(&[2]));
        let loss = x.sum();
        g.backward(loss).unwrap();
        assert!(g.backward(loss).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let g = Graph::<f64>::new();
        let w = g.param(Tensor::ones(&[2, 2]));
        let c = g.constant(Tensor::ones(&[2, 2]));
        let loss = w.matmul(&c).unwrap().sum();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn dropout_rejects_p_one() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(&[4]));
        let mut rng = rand::thread_rng();
        assert!(x.dropout(1.0, true, &mut rng).is_err());
    }
}
