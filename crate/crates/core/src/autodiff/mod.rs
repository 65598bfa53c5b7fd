//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] evaluates ops eagerly and appends one [`Node`] per op with
//! its inputs and output value, so node ids are topologically ordered by
//! construction. [`Graph::backward`] walks the tape in reverse.

mod gradcheck;

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, ConvParams, Scalar, Shape, Tensor};

pub use gradcheck::{finite_diff_check, finite_diff_check_many, GradCheckReport, DEFAULT_FD_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Payload-free op tag used for structural scans of a recorded graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Relu,
    Mul,
    Add,
    Scale,
    GlobalSum,
    ChannelSum,
    DivByPosition,
    Conv2d,
    ChannelAffine,
    Concat,
    Slice,
    SumAll,
    KvOuter,
    QueryMatMul,
    SoftmaxCrossEntropy,
    Custom,
}

impl OpKind {
    /// Token-mixing matrix products (`KᵀV` and `Q·M`). Convolutions are
    /// per-position channel maps and are not counted here.
    pub fn is_matrix_product(self) -> bool {
        matches!(self, OpKind::KvOuter | OpKind::QueryMatMul)
    }

    pub fn is_exponential(self) -> bool {
        matches!(self, OpKind::SoftmaxCrossEntropy)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A user-supplied differentiable op. Returning `None` from
/// [`CustomOp::backward`] marks the op as having no adjoint.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Option<Result<Vec<Tensor<T>>>>;
}

#[derive(Clone)]
enum Op<T: Scalar> {
    Leaf,
    Relu,
    Mul,
    Add,
    Scale(T),
    GlobalSum,
    ChannelSum,
    DivByPosition(T),
    Conv2d(ConvParams),
    ChannelAffine,
    Concat,
    Slice { start: usize },
    SumAll,
    KvOuter,
    QueryMatMul,
    SoftmaxCrossEntropy { labels: Vec<usize>, probs: Tensor<T> },
    Custom(Arc<dyn CustomOp<T>>),
}

impl<T: Scalar> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Relu => OpKind::Relu,
            Op::Mul => OpKind::Mul,
            Op::Add => OpKind::Add,
            Op::Scale(_) => OpKind::Scale,
            Op::GlobalSum => OpKind::GlobalSum,
            Op::ChannelSum => OpKind::ChannelSum,
            Op::DivByPosition(_) => OpKind::DivByPosition,
            Op::Conv2d(_) => OpKind::Conv2d,
            Op::ChannelAffine => OpKind::ChannelAffine,
            Op::Concat => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::SumAll => OpKind::SumAll,
            Op::KvOuter => OpKind::KvOuter,
            Op::QueryMatMul => OpKind::QueryMatMul,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::Custom(_) => OpKind::Custom,
        }
    }
}

struct Node<T: Scalar> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    requires_grad: bool,
    scope: Option<Arc<str>>,
}

/// Read-only view of a recorded node.
#[derive(Debug, Clone, Copy)]
pub struct NodeInfo<'a> {
    pub id: NodeId,
    pub kind: OpKind,
    pub scope: Option<&'a str>,
    pub shape: Shape,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    scope: Option<Arc<str>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            scope: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Labels every node recorded from now on; `None` clears the label.
    pub fn set_scope(&mut self, scope: Option<&str>) {
        self.scope = scope.map(Arc::from);
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn into_value(mut self, id: NodeId) -> Tensor<T> {
        self.nodes.swap_remove(id.0).value
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeInfo<'_>> + '_ {
        self.nodes.iter().enumerate().map(|(i, n)| NodeInfo {
            id: NodeId(i),
            kind: n.op.kind(),
            scope: n.scope.as_deref(),
            shape: n.value.shape(),
        })
    }

    /// Nodes whose scope label starts with `prefix`.
    pub fn nodes_in_scope<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = NodeInfo<'a>> + 'a {
        self.nodes()
            .filter(move |n| n.scope.is_some_and(|s| s.starts_with(prefix)))
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, vec![], value, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, vec![], value, false)
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, value: Tensor<T>, leaf_grad: bool) -> NodeId {
        let requires_grad = match op {
            Op::Leaf => leaf_grad,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            scope: self.scope.clone(),
        });
        NodeId(self.nodes.len() - 1)
    }

    fn unary(&mut self, op: Op<T>, x: NodeId, value: Tensor<T>) -> NodeId {
        self.push(op, vec![x], value, false)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = tensor::relu(self.value(x));
        self.unary(Op::Relu, x, v)
    }

    /// Elementwise product; `b` may be a `(B, C, 1, 1)` vector broadcast over space.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::ew_mul_broadcast(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul, vec![a, b], v, false))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add, vec![a, b], v, false))
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let v = tensor::scale(self.value(x), factor);
        self.unary(Op::Scale(factor), x, v)
    }

    pub fn global_sum(&mut self, x: NodeId) -> NodeId {
        let v = tensor::global_sum_spatial(self.value(x));
        self.unary(Op::GlobalSum, x, v)
    }

    pub fn channel_sum(&mut self, x: NodeId) -> NodeId {
        let v = tensor::channel_sum(self.value(x));
        self.unary(Op::ChannelSum, x, v)
    }

    pub fn div_by_position(&mut self, num: NodeId, den: NodeId, eps: T) -> Result<NodeId> {
        let v = tensor::div_by_position(self.value(num), self.value(den), eps)?;
        Ok(self.push(Op::DivByPosition(eps), vec![num, den], v, false))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        params: ConvParams,
    ) -> Result<NodeId> {
        let v = tensor::conv2d(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            params,
        )?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(Op::Conv2d(params), inputs, v, false))
    }

    pub fn channel_affine(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        let v = tensor::channel_affine(self.value(x), self.value(scale), self.value(shift))?;
        Ok(self.push(Op::ChannelAffine, vec![x, scale, shift], v, false))
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = tensor::concat_channels(&values)?;
        Ok(self.push(Op::Concat, parts.to_vec(), v, false))
    }

    pub fn slice_channels(&mut self, x: NodeId, start: usize, channels: usize) -> Result<NodeId> {
        let v = tensor::slice_channels(self.value(x), start, channels)?;
        Ok(self.unary(Op::Slice { start }, x, v))
    }

    pub fn split_channels(&mut self, x: NodeId, sizes: &[usize]) -> Result<Vec<NodeId>> {
        let total: usize = sizes.iter().sum();
        if total != self.value(x).shape().channels {
            return Err(Error::invalid(
                "split_channels",
                format!("sizes {sizes:?} do not sum to {} channels", self.value(x).shape().channels),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice_channels(x, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = tensor::sum_all(self.value(x));
        self.unary(Op::SumAll, x, v)
    }

    /// `Σ_j K_jᵀ V_j` as a `(B, 1, d, d)` matrix.
    pub fn kv_outer(&mut self, k: NodeId, v: NodeId) -> Result<NodeId> {
        let out = tensor::kv_outer(self.value(k), self.value(v))?;
        Ok(self.push(Op::KvOuter, vec![k, v], out, false))
    }

    pub fn query_matmul(&mut self, q: NodeId, m: NodeId) -> Result<NodeId> {
        let out = tensor::query_matmul(self.value(q), self.value(m))?;
        Ok(self.push(Op::QueryMatMul, vec![q, m], out, false))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = tensor::softmax_cross_entropy(self.value(logits), labels)?;
        let op = Op::SoftmaxCrossEntropy {
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.unary(op, logits, loss))
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp<T>>, inputs: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&i| self.value(i)).collect();
        let v = op.forward(&values)?;
        Ok(self.push(Op::Custom(op), inputs.to_vec(), v, false))
    }

    /// Back-propagates `seed` (the gradient of the loss with respect to
    /// `output`) and returns gradients for every node that requires one.
    pub fn backward(&self, output: NodeId, seed: Tensor<T>) -> Result<Gradients<T>> {
        crate::counter::uncounted(|| self.backward_impl(output, seed))
    }

    fn backward_impl(&self, output: NodeId, seed: Tensor<T>) -> Result<Gradients<T>> {
        let out_shape = self.value(output).shape();
        if seed.shape() != out_shape {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: out_shape,
                rhs: seed.shape(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let input_grads = self.adjoint(node, &g)?;
            grads[idx] = Some(g);
            for (&input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                grads[input.0] = Some(match grads[input.0].take() {
                    Some(acc) => accumulate(acc, &ig),
                    None => ig,
                });
            }
        }
        Ok(Gradients { grads })
    }

    fn adjoint(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let input = |i: usize| self.value(node.inputs[i]);
        let wants = |i: usize| self.nodes[node.inputs[i].0].requires_grad;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Relu => vec![Some(tensor::relu_backward(input(0), g))],
            Op::Mul => {
                let (a, b) = (input(0), input(1));
                let ga = if wants(0) {
                    Some(tensor::ew_mul_broadcast(g, b)?)
                } else {
                    None
                };
                let gb = if wants(1) {
                    let prod = tensor::ew_mul_broadcast(g, a)?;
                    Some(if b.shape() == a.shape() {
                        prod
                    } else {
                        tensor::global_sum_spatial(&prod)
                    })
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Scale(k) => vec![Some(tensor::scale(g, *k))],
            Op::GlobalSum => {
                let s = input(0).shape();
                vec![Some(tensor::broadcast_spatial(g, s.height, s.width))]
            }
            Op::ChannelSum => vec![Some(tensor::broadcast_channels(g, input(0).shape().channels))],
            Op::DivByPosition(eps) => {
                let (gn, gd) = tensor::div_by_position_backward(input(0), input(1), *eps, g);
                vec![Some(gn), Some(gd)]
            }
            Op::Conv2d(p) => {
                let (x, w) = (input(0), input(1));
                let gx = if wants(0) {
                    Some(tensor::conv2d_backward_input(g, w, x.shape(), *p)?)
                } else {
                    None
                };
                let gw = if wants(1) {
                    Some(tensor::conv2d_backward_weight(g, x, w.shape(), *p)?)
                } else {
                    None
                };
                let mut out = vec![gx, gw];
                if node.inputs.len() == 3 {
                    out.push(wants(2).then(|| tensor::channel_reduce(g, None)));
                }
                out
            }
            Op::ChannelAffine => {
                let (x, scale) = (input(0), input(1));
                let gx = if wants(0) {
                    Some(tensor::channel_affine(g, scale, &Tensor::zeros(scale.shape()))?)
                } else {
                    None
                };
                let gs = wants(1).then(|| tensor::channel_reduce(g, Some(x)));
                let gb = wants(2).then(|| tensor::channel_reduce(g, None));
                vec![gx, gs, gb]
            }
            Op::Concat => {
                let mut start = 0;
                node.inputs
                    .iter()
                    .map(|&i| {
                        let c = self.value(i).shape().channels;
                        let part = tensor::slice_channels(g, start, c);
                        start += c;
                        part.map(Some)
                    })
                    .collect::<Result<_>>()?
            }
            Op::Slice { start, .. } => {
                vec![Some(tensor::pad_channels(g, *start, input(0).shape().channels))]
            }
            Op::SumAll => vec![Some(Tensor::full(input(0).shape(), g.item()))],
            Op::KvOuter => {
                let (gk, gv) = tensor::kv_outer_backward(input(0), input(1), g);
                vec![Some(gk), Some(gv)]
            }
            Op::QueryMatMul => {
                let (gq, gm) = tensor::query_matmul_backward(input(0), input(1), g);
                vec![Some(gq), Some(gm)]
            }
            Op::SoftmaxCrossEntropy { labels, probs } => {
                let s = probs.shape();
                let k = s.channels;
                let scale = g.item() / T::from_f64(s.batch as f64);
                let mut data = probs.data().to_vec();
                for (b, &l) in labels.iter().enumerate() {
                    data[b * k + l] -= T::one();
                }
                data.iter_mut().for_each(|v| *v *= scale);
                vec![Some(Tensor::from_parts(s, data))]
            }
            Op::Custom(op) => {
                let inputs: Vec<&Tensor<T>> = (0..node.inputs.len()).map(input).collect();
                let grads = op
                    .backward(&inputs, &node.value, g)
                    .ok_or_else(|| Error::MissingAdjoint(op.name().to_string()))??;
                if grads.len() != inputs.len() {
                    return Err(Error::invalid(
                        "custom backward",
                        format!("{} returned {} gradients for {} inputs", op.name(), grads.len(), inputs.len()),
                    ));
                }
                grads.into_iter().map(Some).collect()
            }
        })
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `id`; `None` if the node does not influence the output.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, zeros shaped like `like` when it does not influence the output.
    pub fn get_or_zeros(&self, id: NodeId, like: Shape) -> Tensor<T> {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

fn accumulate<T: Scalar>(acc: Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let shape = acc.shape();
    let mut data = acc.into_data();
    data.iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b);
    Tensor::from_parts(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_slice([1, 2, 2, 1], &[1.0, -2.0, 3.0, 0.5]).unwrap());
        let y = g.sum_all(x);
        let grads = g.backward(y, Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn relu_subgradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_slice([1, 1, 1, 3], &[-1.0, 2.0, 0.0]).unwrap());
        let r = g.relu(x);
        let y = g.sum_all(r);
        let grads = g.backward(y, Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn reused_leaf_accumulates() {
        // f(x) = sum(x * x) -> 2x
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_slice([1, 1, 1, 2], &[3.0, -1.5]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let y = g.sum_all(sq);
        let grads = g.backward(y, Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0, -3.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(Shape::new(1, 1, 1, 2), 2.0));
        let c = g.constant(Tensor::full(Shape::new(1, 1, 1, 2), 3.0));
        let p = g.mul(x, c).unwrap();
        let y = g.sum_all(p);
        let grads = g.backward(y, Tensor::scalar(1.0)).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn seed_shape_checked() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(Shape::new(1, 1, 1, 2), 2.0));
        assert!(g.backward(x, Tensor::scalar(1.0)).is_err());
    }

    struct NoAdjoint;

    impl CustomOp<f64> for NoAdjoint {
        fn name(&self) -> &str {
            "no_adjoint"
        }
        fn forward(&self, inputs: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
            Ok(inputs[0].clone())
        }
        fn backward(&self, _: &[&Tensor<f64>], _: &Tensor<f64>, _: &Tensor<f64>) -> Option<Result<Vec<Tensor<f64>>>> {
            None
        }
    }

    #[test]
    fn missing_adjoint_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(Shape::new(1, 1, 1, 2), 2.0));
        let y = g.custom(Arc::new(NoAdjoint), &[x]).unwrap();
        let s = g.sum_all(y);
        match g.backward(s, Tensor::scalar(1.0)) {
            Err(Error::MissingAdjoint(name)) => assert_eq!(name, "no_adjoint"),
            other => panic!("expected missing adjoint, got {:?}", other.err()),
        }
    }

    #[test]
    fn scopes_are_recorded() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::full(Shape::new(1, 1, 1, 2), 1.0));
        g.set_scope(Some("stage3.block0"));
        let r = g.relu(x);
        g.set_scope(None);
        g.sum_all(r);
        let scoped: Vec<_> = g.nodes_in_scope("stage3").map(|n| n.kind).collect();
        assert_eq!(scoped, vec![OpKind::Relu]);
    }
}
