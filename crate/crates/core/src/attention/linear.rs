use super::reduce::check_same_shape;
use super::{check_eps, QkvBundle};
use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::tensor::{self, Scalar, Tensor};

/// ReLU linear attention, the matrix-product baseline:
/// `O_i = ReLU(Q_i) (Σ_j ReLU(K_j)ᵀ V_j) / (ReLU(Q_i) · Σ_j ReLU(K_j)ᵀ + eps)`.
/// Each spatial position is a token of dimension `d` (the channel count).
pub fn relu_linear_attention<T: Scalar>(qkv: &QkvBundle<T>, eps: T) -> Result<Tensor<T>> {
    check_eps(eps)?;
    let rq = tensor::relu(&qkv.q);
    let rk = tensor::relu(&qkv.k);
    let kv = tensor::kv_outer(&rk, &qkv.v)?;
    let num = tensor::query_matmul(&rq, &kv)?;
    let sum_k = tensor::global_sum_spatial(&rk);
    let den = tensor::channel_sum(&tensor::ew_mul_broadcast(&rq, &sum_k)?);
    tensor::div_by_position(&num, &den, eps)
}

/// Records [`relu_linear_attention`] on `g`.
pub fn relu_linear_attention_graph<T: Scalar>(
    g: &mut Graph<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    eps: T,
) -> Result<NodeId> {
    check_eps(eps)?;
    check_same_shape(g, q, k, v)?;
    let rq = g.relu(q);
    let rk = g.relu(k);
    let kv = g.kv_outer(rk, v)?;
    let num = g.query_matmul(rq, kv)?;
    let sum_k = g.global_sum(rk);
    let qk = g.mul(rq, sum_k)?;
    let den = g.channel_sum(qk);
    g.div_by_position(num, den, eps)
}
