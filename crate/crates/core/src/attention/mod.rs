//! Multi-scale local context, ReduceFormer attention, the ReLU linear
//! attention baseline, and their operation counts.
//!
//! All attention operators take a [`QkvBundle`] whose tensors share one
//! `(B, d, H, W)` shape: `d = S·C` channels per token and `N = H·W` tokens.

mod cost;
mod linear;
mod local_context;
mod reduce;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Shape, Tensor};

pub use cost::{flop_count_attention, AttentionKind};
pub use linear::{relu_linear_attention, relu_linear_attention_graph};
pub use local_context::{
    local_context_features, multi_scale_local_context, multi_scale_local_context_graph,
    split_qkv, LocalContextConfig, LocalContextWeights,
};
pub use reduce::{
    closed_form_oracle, reduce_former_attention, reduce_former_attention_graph, reduce_former_reductions,
    ReductionSet,
};

/// Default stabilizer added to the per-position normalizer.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Query, key and value tensors of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct QkvBundle<T: Scalar = f32> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> QkvBundle<T> {
    pub fn new(q: Tensor<T>, k: Tensor<T>, v: Tensor<T>) -> Result<Self> {
        for other in [&k, &v] {
            if other.shape() != q.shape() {
                return Err(Error::ShapeMismatch {
                    op: "qkv_bundle",
                    lhs: q.shape(),
                    rhs: other.shape(),
                });
            }
        }
        Ok(Self { q, k, v })
    }

    /// Uniform `[-1, 1)` entries drawn in q, k, v order.
    pub fn random(shape: Shape, rng: &mut Rng) -> Self {
        let q = rng.tensor(shape, -1.0, 1.0);
        let k = rng.tensor(shape, -1.0, 1.0);
        let v = rng.tensor(shape, -1.0, 1.0);
        Self { q, k, v }
    }

    pub fn shape(&self) -> Shape {
        self.q.shape()
    }

    pub fn cast<U: Scalar>(&self) -> QkvBundle<U> {
        QkvBundle {
            q: self.q.cast(),
            k: self.k.cast(),
            v: self.v.cast(),
        }
    }
}

/// `H × W` layout for `n` tokens: the most square factorization with `H ≤ W`.
pub fn token_grid(n: usize) -> (usize, usize) {
    let mut h = (n as f64).sqrt() as usize;
    while h > 1 && !n.is_multiple_of(h) {
        h -= 1;
    }
    let h = h.max(1);
    (h, n / h)
}

pub(crate) fn check_eps<T: Scalar>(eps: T) -> Result<()> {
    if eps < T::zero() || !eps.is_finite() {
        return Err(Error::invalid("attention", format!("eps must be finite and >= 0, got {eps}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        assert_eq!(token_grid(196), (14, 14));
        assert_eq!(token_grid(49), (7, 7));
        assert_eq!(token_grid(16), (4, 4));
        assert_eq!(token_grid(2), (1, 2));
        assert_eq!(token_grid(12), (3, 4));
        assert_eq!(token_grid(1), (1, 1));
    }

    #[test]
    fn bundle_shapes_must_agree() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 2, 2, 2));
        let b = Tensor::<f32>::zeros(Shape::new(1, 2, 2, 1));
        assert!(QkvBundle::new(a.clone(), a.clone(), b).is_err());
        assert!(QkvBundle::new(a.clone(), a.clone(), a).is_ok());
    }
}
