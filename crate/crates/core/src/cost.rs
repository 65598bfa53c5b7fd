//! Cost records shared by the attention counters, the model counters and
//! the benchmark harness.

use serde::{Deserialize, Serialize};

/// Parameter, multiply-accumulate and elementwise operation counts.
///
/// `macs` counts multiply-accumulate pairs of convolutions, linear layers
/// and token matrix products. `ew_flops` counts every other arithmetic
/// operation (activations, elementwise products, reductions, divisions).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: u64,
    pub macs: u64,
    pub ew_flops: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<WallStats>,
}

impl CostReport {
    /// All floating-point operations, one multiply-accumulate counted as two.
    pub fn total_flops(&self) -> u64 {
        2 * self.macs + self.ew_flops
    }
}

impl std::ops::Add for CostReport {
    type Output = CostReport;

    fn add(self, rhs: CostReport) -> CostReport {
        CostReport {
            params: self.params + rhs.params,
            macs: self.macs + rhs.macs,
            ew_flops: self.ew_flops + rhs.ew_flops,
            wall_ms: None,
        }
    }
}

impl std::iter::Sum for CostReport {
    fn sum<I: Iterator<Item = CostReport>>(iter: I) -> Self {
        iter.fold(CostReport::default(), |a, b| a + b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WallStats {
    pub median_ms: f64,
    pub p5_ms: f64,
    pub p95_ms: f64,
    pub runs: usize,
}
