//! Ready-made gradient checks of the differentiable building blocks.
//!
//! Every check reduces its operator to a scalar by a weighted sum with a
//! fixed random weight tensor, runs in `f64` and keeps every ReLU input at
//! least [`KINK_MARGIN`] away from zero.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::Serialize;

use crate::attention::{reduce_former_attention_graph, token_grid, LocalContextConfig, DEFAULT_EPS};
use crate::autodiff::{finite_diff_check_many, GradCheckReport, Graph, NodeId, DEFAULT_FD_EPS};
use crate::error::{Error, Result};
use crate::model::{init_params, reduce_former_block_graph, reduce_former_block_params, ParamNodes};
use crate::rng::Rng;
use crate::tensor::{ConvParams, Shape, Tensor};

pub const KINK_MARGIN: f64 = 0.1;
pub const GRADCHECK_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradCheckOp {
    Relu,
    Conv2d,
    Reductions,
    RfAttn,
    RfBlock,
}

impl GradCheckOp {
    pub const ALL: [GradCheckOp; 5] = [
        GradCheckOp::Relu,
        GradCheckOp::Conv2d,
        GradCheckOp::Reductions,
        GradCheckOp::RfAttn,
        GradCheckOp::RfBlock,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GradCheckOp::Relu => "relu",
            GradCheckOp::Conv2d => "conv2d",
            GradCheckOp::Reductions => "reductions",
            GradCheckOp::RfAttn => "rf-attn",
            GradCheckOp::RfBlock => "rf-block",
        }
    }
}

impl fmt::Display for GradCheckOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GradCheckOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|op| op.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck op `{s}`")))
    }
}

/// Inputs of a check plus the scalar function under test.
pub struct CheckCase {
    pub inputs: Vec<Tensor<f64>>,
    #[allow(clippy::type_complexity)]
    pub f: Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>>,
}

impl CheckCase {
    pub fn run(&self) -> Result<GradCheckReport> {
        finite_diff_check_many(&self.f, &self.inputs, DEFAULT_FD_EPS)
    }
}

fn token_shape(d: usize, n: usize) -> Shape {
    let (h, w) = token_grid(n);
    Shape::new(1, d, h, w)
}

fn away_from_kinks(shape: Shape, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.away_from_zero(KINK_MARGIN, 1.0))
}

/// `sum(x ⊙ r)` for a constant `r`.
fn weighted_sum(g: &mut Graph<f64>, x: NodeId, r: Tensor<f64>) -> Result<NodeId> {
    let r = g.constant(r);
    let p = g.mul(x, r)?;
    Ok(g.sum_all(p))
}

/// Builds the check for `op` at `d` channels and `n` tokens.
pub fn gradcheck_case(op: GradCheckOp, d: usize, n: usize, seed: u64) -> Result<CheckCase> {
    if d == 0 || n == 0 {
        return Err(Error::invalid("gradcheck", "d and n must be positive"));
    }
    let mut rng = Rng::new(seed);
    let shape = token_shape(d, n);
    let case = match op {
        GradCheckOp::Relu => {
            let r = rng.tensor(shape, -1.0, 1.0);
            CheckCase {
                inputs: vec![away_from_kinks(shape, &mut rng)],
                f: Box::new(move |g, x| {
                    let y = g.relu(x[0]);
                    weighted_sum(g, y, r.clone())
                }),
            }
        }
        GradCheckOp::Conv2d => {
            let groups = if d.is_multiple_of(2) { 2 } else { 1 };
            let cout = 2 * groups;
            let p = ConvParams::new(2, 1, groups);
            let x = rng.tensor(shape, -1.0, 1.0);
            let w = rng.tensor(Shape::new(cout, d / groups, 3, 3), -1.0, 1.0);
            let b = rng.tensor(Shape::new(1, cout, 1, 1), -1.0, 1.0);
            let out = crate::tensor::conv2d(&x, &w, Some(&b), p)?.shape();
            let r = rng.tensor(out, -1.0, 1.0);
            CheckCase {
                inputs: vec![x, w, b],
                f: Box::new(move |g, ids| {
                    let y = g.conv2d(ids[0], ids[1], Some(ids[2]), p)?;
                    weighted_sum(g, y, r.clone())
                }),
            }
        }
        GradCheckOp::Reductions => {
            let r1 = rng.tensor(shape, -1.0, 1.0);
            let r2 = rng.tensor(shape.with_channels(1), -1.0, 1.0);
            CheckCase {
                inputs: vec![rng.tensor(shape, -1.0, 1.0)],
                f: Box::new(move |g, x| {
                    let pooled = g.global_sum(x[0]);
                    let scaled = g.mul(x[0], pooled)?;
                    let a = weighted_sum(g, scaled, r1.clone())?;
                    let per_pos = g.channel_sum(x[0]);
                    let b = weighted_sum(g, per_pos, r2.clone())?;
                    g.add(a, b)
                }),
            }
        }
        GradCheckOp::RfAttn => {
            let q = away_from_kinks(shape, &mut rng);
            let k = away_from_kinks(shape, &mut rng);
            let v = rng.tensor(shape, -1.0, 1.0);
            let r = rng.tensor(shape, -1.0, 1.0);
            CheckCase {
                inputs: vec![q, k, v],
                f: Box::new(move |g, ids| {
                    let o = reduce_former_attention_graph(g, ids[0], ids[1], ids[2], DEFAULT_EPS)?;
                    weighted_sum(g, o, r.clone())
                }),
            }
        }
        GradCheckOp::RfBlock => rf_block_case(d, shape, &mut rng)?,
    };
    Ok(case)
}

/// A reduced-width ReduceFormer block with `d = S·C` attention channels
/// (two scales, one 3×3 depthwise branch).
///
/// Inputs lie in `[1, 2]`, the query and key rows of the qkv projection
/// carry a fixed sign per output channel with magnitude at least
/// [`KINK_MARGIN`], and the depthwise kernels are positive. Every query and
/// key entry then keeps its channel's sign with magnitude above the margin.
fn rf_block_case(d: usize, shape: Shape, rng: &mut Rng) -> Result<CheckCase> {
    let lc = LocalContextConfig {
        base_channels: (d / 2).max(1),
        scales: 2,
        dw_kernels: vec![3],
    };
    let c = lc.base_channels;
    let x_shape = shape.with_channels(c);
    let specs = reduce_former_block_params("rf", &lc);
    let mut params: IndexMap<String, Tensor<f64>> = init_params(&specs, rng)
        .into_iter()
        .map(|(k, v)| (k, v.cast()))
        .collect();
    params["rf.qkv.weight"] = Tensor::from_fn(lc.projection_shape(), |i| {
        let row = i / c;
        if row < 2 * c {
            let sign = if row.is_multiple_of(2) { 1.0 } else { -1.0 };
            sign * rng.uniform(KINK_MARGIN, 1.0)
        } else {
            rng.uniform(-1.0, 1.0)
        }
    });
    params["rf.dw0.weight"] = rng.tensor(lc.depthwise_shape(3), 0.5, 1.0);
    params["rf.proj.norm.scale"] = rng.tensor(Shape::new(1, c, 1, 1), 0.5, 1.5);
    params["rf.proj.norm.shift"] = rng.tensor(Shape::new(1, c, 1, 1), -0.5, 0.5);
    let x = rng.tensor::<f64>(x_shape, 1.0, 2.0);
    let r = rng.tensor(x_shape, -1.0, 1.0);

    let names: Vec<String> = params.keys().cloned().collect();
    let mut inputs = vec![x];
    inputs.extend(params.values().cloned());

    let margin = qk_margin(&lc, &inputs, &names)?;
    if margin < KINK_MARGIN {
        return Err(Error::invalid(
            "gradcheck",
            format!("query/key margin {margin} below {KINK_MARGIN}"),
        ));
    }
    Ok(CheckCase {
        inputs,
        f: Box::new(move |g, ids| {
            let mut p = ParamNodes::new();
            for (name, &id) in names.iter().zip(&ids[1..]) {
                p.insert(name.clone(), id);
            }
            let y = reduce_former_block_graph(g, ids[0], &p, "rf", &lc, DEFAULT_EPS)?;
            weighted_sum(g, y, r.clone())
        }),
    })
}

/// Smallest `|q|` or `|k|` entry the block produces from `inputs`.
fn qk_margin(lc: &LocalContextConfig, inputs: &[Tensor<f64>], names: &[String]) -> Result<f64> {
    let weight = |name: &str| -> Result<&Tensor<f64>> {
        names
            .iter()
            .position(|n| n == name)
            .map(|i| &inputs[i + 1])
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    };
    let w = crate::attention::LocalContextWeights {
        projection: weight("rf.qkv.weight")?.clone(),
        depthwise: vec![weight("rf.dw0.weight")?.clone()],
    };
    let qkv = crate::attention::multi_scale_local_context(&inputs[0], lc, &w)?;
    Ok(qkv
        .q
        .data()
        .iter()
        .chain(qkv.k.data())
        .fold(f64::INFINITY, |m, v| m.min(v.abs())))
}

pub fn run_gradcheck(op: GradCheckOp, d: usize, n: usize, seed: u64) -> Result<GradCheckReport> {
    gradcheck_case(op, d, n, seed)?.run()
}
