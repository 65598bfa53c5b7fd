use super::{check_eps, QkvBundle};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{self, Scalar, Tensor};

/// Intermediate global statistics of ReduceFormer attention.
#[derive(Debug, Clone, PartialEq)]
pub struct ReductionSet<T: Scalar = f32> {
    /// `Σ_j ReLU(K_j)` per channel, `(B, d, 1, 1)`.
    pub sum_k: Tensor<T>,
    /// `Σ_j V_j · sum_k` per channel, `(B, d, 1, 1)`.
    pub sum_v: Tensor<T>,
    /// `Σ_j ReLU(K_j) · sum_v` per channel, `(B, d, 1, 1)`.
    pub sum_kv: Tensor<T>,
    /// `Σ_c ReLU(Q_i,c) · sum_k[c]` per position, `(B, 1, H, W)`.
    pub sum_qk: Tensor<T>,
    pub eps: T,
}

/// Computes the global reductions; also returns `ReLU(Q)` for the output step.
pub fn reduce_former_reductions<T: Scalar>(qkv: &QkvBundle<T>, eps: T) -> Result<(ReductionSet<T>, Tensor<T>)> {
    check_eps(eps)?;
    let rk = tensor::relu(&qkv.k);
    let rq = tensor::relu(&qkv.q);
    let sum_k = tensor::global_sum_spatial(&rk);
    let sum_v = tensor::global_sum_spatial(&tensor::ew_mul_broadcast(&qkv.v, &sum_k)?);
    let sum_kv = tensor::global_sum_spatial(&tensor::ew_mul_broadcast(&rk, &sum_v)?);
    let sum_qk = tensor::channel_sum(&tensor::ew_mul_broadcast(&rq, &sum_k)?);
    Ok((
        ReductionSet {
            sum_k,
            sum_v,
            sum_kv,
            sum_qk,
            eps,
        },
        rq,
    ))
}

/// ReduceFormer attention:
/// `O_i = ReLU(Q_i) ⊙ SUM^KV / (SUM^QK_i + eps)`, built only from global sums,
/// broadcast products and a per-position division.
pub fn reduce_former_attention<T: Scalar>(qkv: &QkvBundle<T>, eps: T) -> Result<Tensor<T>> {
    let (red, rq) = reduce_former_reductions(qkv, eps)?;
    let num = tensor::ew_mul_broadcast(&rq, &red.sum_kv)?;
    tensor::div_by_position(&num, &red.sum_qk, eps)
}

/// Records ReduceFormer attention on `g`; the same steps as [`reduce_former_attention`].
pub fn reduce_former_attention_graph<T: Scalar>(
    g: &mut Graph<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    eps: T,
) -> Result<NodeId> {
    check_eps(eps)?;
    check_same_shape(g, q, k, v)?;
    let rk = g.relu(k);
    let rq = g.relu(q);
    let sum_k = g.global_sum(rk);
    let vk = g.mul(v, sum_k)?;
    let sum_v = g.global_sum(vk);
    let kv = g.mul(rk, sum_v)?;
    let sum_kv = g.global_sum(kv);
    let qk = g.mul(rq, sum_k)?;
    let sum_qk = g.channel_sum(qk);
    let num = g.mul(rq, sum_kv)?;
    g.div_by_position(num, sum_qk, eps)
}

pub(crate) fn check_same_shape<T: Scalar>(g: &Graph<T>, q: NodeId, k: NodeId, v: NodeId) -> Result<()> {
    let qs = g.value(q).shape();
    for other in [k, v] {
        let s = g.value(other).shape();
        if s != qs {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: qs,
                rhs: s,
            });
        }
    }
    Ok(())
}

/// Collapsed form of the staged reductions, evaluated with plain loops:
/// `SUM^KV_c = (Σ_j ReLU(K_j,c))² · Σ_j V_j,c`, so
/// `O_i,c = ReLU(Q_i,c) · SUM^KV_c / (Σ_c' ReLU(Q_i,c') · SUM^K_c' + eps)`.
pub fn closed_form_oracle<T: Scalar>(qkv: &QkvBundle<T>, eps: T) -> Result<Tensor<T>> {
    check_eps(eps)?;
    let s = qkv.shape();
    let relu = |x: T| if x > T::zero() { x } else { T::zero() };
    let mut out = Vec::with_capacity(s.numel());
    for b in 0..s.batch {
        let mut sum_k = vec![T::zero(); s.channels];
        let mut sum_kv = vec![T::zero(); s.channels];
        for c in 0..s.channels {
            let (mut sk, mut sv) = (T::zero(), T::zero());
            for (&k, &v) in qkv.k.plane(b, c).iter().zip(qkv.v.plane(b, c)) {
                sk += relu(k);
                sv += v;
            }
            sum_k[c] = sk;
            sum_kv[c] = sk * sk * sv;
        }
        let mut den = vec![eps; s.tokens()];
        for (c, &sk) in sum_k.iter().enumerate() {
            for (d, &q) in den.iter_mut().zip(qkv.q.plane(b, c)) {
                *d += relu(q) * sk;
            }
        }
        for (c, &skv) in sum_kv.iter().enumerate() {
            for (&q, &d) in qkv.q.plane(b, c).iter().zip(&den) {
                out.push(relu(q) * skv / d);
            }
        }
    }
    Tensor::new(s, out)
}
