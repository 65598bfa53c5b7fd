//! Closed-form operation counts of the two attention operators.
//!
//! With batch `B`, token dimension `d` and `N` tokens:
//!
//! * ReduceFormer: two ReLUs, three global sums, four broadcast products,
//!   one channel sum and one division, each touching `B·d·N` elements,
//!   plus `B·N` epsilon additions: `ew = 11·B·d·N + B·N`, no MACs.
//! * ReLU linear: `KᵀV` accumulation and the per-token query product are
//!   `B·d²·N` MACs each; two ReLUs, the key sum, the denominator product and
//!   channel sum and the division add `6·B·d·N + B·N` elementwise ops.

use serde::{Deserialize, Serialize};

use crate::cost::CostReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    ReduceFormer,
    ReluLinear,
}

pub fn flop_count_attention(kind: AttentionKind, batch: usize, d: usize, n: usize) -> CostReport {
    let (b, d, n) = (batch as u64, d as u64, n as u64);
    let (macs, ew_flops) = match kind {
        AttentionKind::ReduceFormer => (0, 11 * b * d * n + b * n),
        AttentionKind::ReluLinear => (2 * b * d * d * n, 6 * b * d * n + b * n),
    };
    CostReport {
        params: 0,
        macs,
        ew_flops,
        wall_ms: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduceformer_linear_in_tokens() {
        for d in [1, 8, 64] {
            let a = flop_count_attention(AttentionKind::ReduceFormer, 1, d, 196);
            let b = flop_count_attention(AttentionKind::ReduceFormer, 1, d, 392);
            assert_eq!(b.total_flops(), 2 * a.total_flops());
        }
    }

    #[test]
    fn baseline_quadratic_in_dim() {
        let a = flop_count_attention(AttentionKind::ReluLinear, 1, 32, 196);
        let b = flop_count_attention(AttentionKind::ReluLinear, 1, 64, 196);
        assert_eq!(b.macs, 4 * a.macs);
    }
}
