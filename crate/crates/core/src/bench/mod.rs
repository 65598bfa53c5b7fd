//! Timed and counted benchmarks of the attention operators and full models.
//!
//! Each measurement runs one counted warmup pass on the calling thread,
//! the remaining warmup passes, then `repeats` timed passes inside a
//! [`par::with_threads`] scope. Operation counts therefore do not depend
//! on the thread count.

mod report;
mod stats;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use report::{format_table, write_csv, write_json};
pub use stats::{log_log_slope, percentile, summarize};

use crate::attention::{reduce_former_attention, relu_linear_attention, token_grid, QkvBundle, DEFAULT_EPS};
use crate::cost::WallStats;
use crate::counter::{self, OpCounts};
use crate::error::{Error, Result};
use crate::model::{build_variant, VariantConfig};
use crate::par;
use crate::rng::Rng;
use crate::tensor::{relative_error, Shape, Tensor};

pub const MIN_REPEATS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchTarget {
    AttentionRf,
    AttentionEq1,
    Model,
}

impl BenchTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchTarget::AttentionRf => "attention_rf",
            BenchTarget::AttentionEq1 => "attention_eq1",
            BenchTarget::Model => "model",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub target: BenchTarget,
    pub batch: usize,
    /// Attention channels `d`; unused for models.
    pub d: usize,
    /// Attention tokens `N`, laid out on [`token_grid`]; unused for models.
    pub n: usize,
    /// Model architecture; required for [`BenchTarget::Model`].
    pub model: Option<VariantConfig>,
    /// Square model input side; unused for attention.
    pub resolution: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub threads: usize,
    pub seed: u64,
}

impl BenchSpec {
    pub fn attention(target: BenchTarget, batch: usize, d: usize, n: usize) -> Self {
        Self {
            target,
            batch,
            d,
            n,
            model: None,
            resolution: 0,
            repeats: 20,
            warmup: 2,
            threads: 1,
            seed: 0,
        }
    }

    pub fn model(config: VariantConfig, batch: usize, resolution: usize) -> Self {
        Self {
            target: BenchTarget::Model,
            batch,
            d: 0,
            n: 0,
            model: Some(config),
            resolution,
            repeats: 20,
            warmup: 2,
            threads: 1,
            seed: 0,
        }
    }

    pub fn with_repeats(mut self, repeats: usize, warmup: usize) -> Self {
        self.repeats = repeats;
        self.warmup = warmup;
        self
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let op = "BenchSpec";
        if self.repeats < MIN_REPEATS {
            return Err(Error::invalid(op, format!("repeats {} < {MIN_REPEATS}", self.repeats)));
        }
        if self.warmup == 0 {
            return Err(Error::invalid(op, "warmup must be at least 1"));
        }
        if self.threads == 0 || self.batch == 0 {
            return Err(Error::invalid(op, "threads and batch must be positive"));
        }
        match self.target {
            BenchTarget::Model if self.model.is_none() => Err(Error::invalid(op, "model target needs a config")),
            BenchTarget::Model => Ok(()),
            _ if self.d == 0 || self.n == 0 => Err(Error::invalid(op, "attention needs d >= 1 and n >= 1")),
            _ => Ok(()),
        }
    }

    fn attention_shape(&self) -> Shape {
        let (h, w) = token_grid(self.n);
        Shape::new(self.batch, self.d, h, w)
    }
}

/// Timing statistics and operation counts of one [`BenchSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub target: BenchTarget,
    /// Variant name for models, empty for attention.
    pub variant: String,
    pub batch: usize,
    pub d: usize,
    pub n: usize,
    pub resolution: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub threads: usize,
    pub seed: u64,
    pub median_ms: f64,
    pub p5_ms: f64,
    pub p95_ms: f64,
    /// `2·macs + ew_flops` of one pass over the whole batch.
    pub flops: u64,
    pub macs: u64,
    pub ew_flops: u64,
    pub throughput_items_per_s: f64,
}

impl BenchRow {
    fn new(spec: &BenchSpec, counts: OpCounts, wall: WallStats) -> Self {
        Self {
            target: spec.target,
            variant: spec.model.as_ref().map(|m| m.name.to_string()).unwrap_or_default(),
            batch: spec.batch,
            d: spec.d,
            n: spec.n,
            resolution: spec.resolution,
            repeats: spec.repeats,
            warmup: spec.warmup,
            threads: spec.threads,
            seed: spec.seed,
            median_ms: wall.median_ms,
            p5_ms: wall.p5_ms,
            p95_ms: wall.p95_ms,
            flops: counts.total_flops(),
            macs: counts.macs,
            ew_flops: counts.flops,
            throughput_items_per_s: spec.batch as f64 * 1000.0 / wall.median_ms,
        }
    }

    pub fn wall(&self) -> WallStats {
        WallStats {
            median_ms: self.median_ms,
            p5_ms: self.p5_ms,
            p95_ms: self.p95_ms,
            runs: self.repeats,
        }
    }
}

fn timed(spec: &BenchSpec, f: impl Fn() -> Result<()> + Sync) -> Result<(OpCounts, WallStats)> {
    let (first, counts) = counter::measure(&f);
    first?;
    let samples = par::with_threads(spec.threads, || -> Result<Vec<f64>> {
        for _ in 1..spec.warmup {
            f()?;
        }
        (0..spec.repeats)
            .map(|_| {
                let start = Instant::now();
                f()?;
                Ok(start.elapsed().as_secs_f64() * 1e3)
            })
            .collect()
    })?;
    // Sub-nanosecond kernels would otherwise report a zero median.
    let samples: Vec<f64> = samples.into_iter().map(|s| s.max(1e-6)).collect();
    Ok((counts, summarize(&samples)))
}

fn attention(target: BenchTarget, qkv: &QkvBundle<f32>) -> Result<Tensor<f32>> {
    let eps = DEFAULT_EPS as f32;
    match target {
        BenchTarget::AttentionRf => reduce_former_attention(qkv, eps),
        BenchTarget::AttentionEq1 => relu_linear_attention(qkv, eps),
        BenchTarget::Model => unreachable!("not an attention target"),
    }
}

fn bench_attention(spec: &BenchSpec, qkv: &QkvBundle<f32>) -> Result<BenchRow> {
    let (counts, wall) = timed(spec, || attention(spec.target, qkv).map(drop))?;
    Ok(BenchRow::new(spec, counts, wall))
}

pub fn run_bench(spec: &BenchSpec) -> Result<BenchRow> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    match (&spec.target, &spec.model) {
        (BenchTarget::Model, Some(cfg)) => {
            let model = build_variant(cfg, &mut rng)?;
            let x = rng.tensor::<f32>(Shape::new(spec.batch, 3, spec.resolution, spec.resolution), -1.0, 1.0);
            model.check_input(x.shape())?;
            let (counts, wall) = timed(spec, || model.forward(&x).map(drop))?;
            Ok(BenchRow::new(spec, counts, wall))
        }
        _ => bench_attention(spec, &QkvBundle::random(spec.attention_shape(), &mut rng)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Attention token count `N`.
    Tokens,
    /// Attention channels `d`.
    Dim,
    /// Model input resolution.
    Resolution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub target: BenchTarget,
    pub axis: SweepAxis,
    pub points: Vec<usize>,
    pub rows: Vec<BenchRow>,
    /// Log-log slope of total FLOPs against the swept value.
    pub slope_total: Option<f64>,
    /// Log-log slope of the dominant term: `2·macs` when multiply-accumulates
    /// are present, elementwise FLOPs otherwise.
    pub slope_dominant: Option<f64>,
}

pub fn dominant_flops(row: &BenchRow) -> u64 {
    if row.macs > 0 {
        2 * row.macs
    } else {
        row.ew_flops
    }
}

/// Benchmarks `base` at every point of an ascending `sweep` along `axis`
/// and fits log-log slopes of the counted FLOPs.
pub fn scaling_study(base: &BenchSpec, axis: SweepAxis, sweep: &[usize]) -> Result<ScalingReport> {
    if sweep.is_empty() || sweep.windows(2).any(|w| w[0] >= w[1]) || sweep[0] == 0 {
        return Err(Error::invalid(
            "scaling_study",
            format!("sweep {sweep:?} must be non-empty, positive and strictly ascending"),
        ));
    }
    let is_model = base.target == BenchTarget::Model;
    if is_model != (axis == SweepAxis::Resolution) {
        return Err(Error::invalid(
            "scaling_study",
            format!("axis {axis:?} does not apply to target {}", base.target.as_str()),
        ));
    }
    let rows = sweep
        .iter()
        .map(|&p| {
            let mut spec = base.clone();
            match axis {
                SweepAxis::Tokens => spec.n = p,
                SweepAxis::Dim => spec.d = p,
                SweepAxis::Resolution => spec.resolution = p,
            }
            run_bench(&spec)
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = sweep.iter().map(|&p| p as f64).collect();
    let fit = |f: &dyn Fn(&BenchRow) -> u64| {
        let ys: Vec<f64> = rows.iter().map(|r| f(r) as f64).collect();
        log_log_slope(&xs, &ys)
    };
    Ok(ScalingReport {
        target: base.target,
        axis,
        points: sweep.to_vec(),
        slope_total: fit(&|r| r.flops),
        slope_dominant: fit(&dominant_flops),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub d: usize,
    pub n: usize,
    pub batch: usize,
    pub reduceformer: BenchRow,
    pub relu_linear: BenchRow,
    /// Exact ratio of counted FLOPs, baseline over ReduceFormer.
    pub flop_ratio: f64,
    /// Median latency of ReduceFormer over median latency of the baseline.
    pub latency_ratio: f64,
    pub outputs_finite: bool,
    pub shapes_equal: bool,
    /// Norm-wise relative difference between the two outputs.
    pub output_rel_diff: f64,
}

/// Runs both attention operators on one shared random bundle.
pub fn compare_attention(d: usize, n: usize, batch: usize, repeats: usize, threads: usize, seed: u64) -> Result<Comparison> {
    let rf_spec = BenchSpec::attention(BenchTarget::AttentionRf, batch, d, n)
        .with_repeats(repeats, 2)
        .with_threads(threads)
        .with_seed(seed);
    rf_spec.validate()?;
    let eq1_spec = BenchSpec {
        target: BenchTarget::AttentionEq1,
        ..rf_spec.clone()
    };
    let qkv = QkvBundle::<f32>::random(rf_spec.attention_shape(), &mut Rng::new(seed));
    let rf_out = attention(BenchTarget::AttentionRf, &qkv)?;
    let eq1_out = attention(BenchTarget::AttentionEq1, &qkv)?;
    let outputs_finite = rf_out.is_finite() && eq1_out.is_finite();
    let shapes_equal = rf_out.shape() == eq1_out.shape();
    if !outputs_finite || !shapes_equal {
        return Err(Error::invalid(
            "compare_attention",
            format!("outputs finite: {outputs_finite}, shapes equal: {shapes_equal}"),
        ));
    }
    let reduceformer = bench_attention(&rf_spec, &qkv)?;
    let relu_linear = bench_attention(&eq1_spec, &qkv)?;
    Ok(Comparison {
        d,
        n,
        batch,
        flop_ratio: relu_linear.flops as f64 / reduceformer.flops as f64,
        latency_ratio: reduceformer.median_ms / relu_linear.median_ms,
        outputs_finite,
        shapes_equal,
        output_rel_diff: relative_error(&rf_out, &eq1_out),
        reduceformer,
        relu_linear,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{flop_count_attention, AttentionKind};

    #[test]
    fn attention_row_counts_match_analytic() {
        let spec = BenchSpec::attention(BenchTarget::AttentionRf, 1, 16, 49).with_repeats(5, 1);
        let row = run_bench(&spec).unwrap();
        let analytic = flop_count_attention(AttentionKind::ReduceFormer, 1, 16, 49);
        assert_eq!(row.flops, analytic.total_flops());
        assert_eq!(row.macs, 0);
        assert!(row.p5_ms <= row.median_ms && row.median_ms <= row.p95_ms);
        assert!((row.throughput_items_per_s - 1000.0 / row.median_ms).abs() < 1e-9);
    }

    #[test]
    fn spec_validation() {
        let ok = BenchSpec::attention(BenchTarget::AttentionEq1, 1, 4, 4);
        assert!(ok.clone().with_repeats(4, 1).validate().is_err());
        assert!(ok.clone().with_repeats(5, 0).validate().is_err());
        assert!(ok.clone().with_threads(0).validate().is_err());
        let mut no_model = ok.clone();
        no_model.target = BenchTarget::Model;
        assert!(no_model.validate().is_err());
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn single_point_sweep_has_no_fit() {
        let base = BenchSpec::attention(BenchTarget::AttentionRf, 1, 4, 4).with_repeats(5, 1);
        let r = scaling_study(&base, SweepAxis::Tokens, &[16]).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.slope_total, None);
        assert!(scaling_study(&base, SweepAxis::Tokens, &[16, 4]).is_err());
        assert!(scaling_study(&base, SweepAxis::Resolution, &[32]).is_err());
    }
}
