//! Multi-scale local context: a pointwise projection to `3C` channels plus
//! `S - 1` depthwise convolutions of it, concatenated to `3·S·C` channels
//! and regrouped into query, key and value tensors.
//!
//! Channel layout of the concatenated features is `[Q|K|V]` for the
//! projection followed by `[Q|K|V]` for each depthwise scale; the split
//! gathers each role's block from every scale in order.

use serde::{Deserialize, Serialize};

use super::QkvBundle;
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{self, ConvParams, Scalar, Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalContextConfig {
    pub base_channels: usize,
    pub scales: usize,
    /// One odd kernel size per depthwise branch; length `scales - 1`.
    pub dw_kernels: Vec<usize>,
}

impl LocalContextConfig {
    /// Two scales with a single 5×5 depthwise branch.
    pub fn with_channels(base_channels: usize) -> Self {
        Self {
            base_channels,
            scales: 2,
            dw_kernels: vec![5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.scales == 0 {
            return Err(Error::Config("channels and scales must be positive".into()));
        }
        if self.dw_kernels.len() + 1 != self.scales {
            return Err(Error::Config(format!(
                "{} scales need {} depthwise kernels, got {:?}",
                self.scales,
                self.scales - 1,
                self.dw_kernels
            )));
        }
        if let Some(k) = self.dw_kernels.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::Config(format!("depthwise kernel {k} must be odd")));
        }
        Ok(())
    }

    /// Channels of the projection (`3C`).
    pub fn projected_channels(&self) -> usize {
        3 * self.base_channels
    }

    /// Channels of the concatenated features (`3·S·C`).
    pub fn qkv_channels(&self) -> usize {
        3 * self.scales * self.base_channels
    }

    /// Channels per query/key/value tensor (`S·C`).
    pub fn head_channels(&self) -> usize {
        self.scales * self.base_channels
    }

    pub fn projection_shape(&self) -> Shape {
        Shape::new(self.projected_channels(), self.base_channels, 1, 1)
    }

    pub fn depthwise_shape(&self, kernel: usize) -> Shape {
        Shape::new(self.projected_channels(), 1, kernel, kernel)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalContextWeights<T: Scalar = f32> {
    /// `(3C, C, 1, 1)` pointwise projection.
    pub projection: Tensor<T>,
    /// One `(3C, 1, k, k)` depthwise kernel per branch.
    pub depthwise: Vec<Tensor<T>>,
}

impl<T: Scalar> LocalContextWeights<T> {
    /// Fan-in-scaled uniform initialization.
    pub fn init(cfg: &LocalContextConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let uniform = |rng: &mut Rng, shape: Shape| {
            let bound = (3.0 / (shape.channels * shape.height * shape.width) as f64).sqrt();
            rng.tensor(shape, -bound, bound)
        };
        let projection = uniform(rng, cfg.projection_shape());
        let depthwise = cfg
            .dw_kernels
            .iter()
            .map(|&k| uniform(rng, cfg.depthwise_shape(k)))
            .collect();
        Ok(Self {
            projection,
            depthwise,
        })
    }

    fn check(&self, cfg: &LocalContextConfig) -> Result<()> {
        cfg.validate()?;
        if self.projection.shape() != cfg.projection_shape() {
            return Err(Error::ShapeMismatch {
                op: "multi_scale_local_context",
                lhs: cfg.projection_shape(),
                rhs: self.projection.shape(),
            });
        }
        if self.depthwise.len() != cfg.dw_kernels.len() {
            return Err(Error::Config(format!(
                "{} depthwise weights for {} kernels",
                self.depthwise.len(),
                cfg.dw_kernels.len()
            )));
        }
        for (w, &k) in self.depthwise.iter().zip(&cfg.dw_kernels) {
            if w.shape() != cfg.depthwise_shape(k) {
                return Err(Error::ShapeMismatch {
                    op: "multi_scale_local_context",
                    lhs: cfg.depthwise_shape(k),
                    rhs: w.shape(),
                });
            }
        }
        Ok(())
    }
}

fn check_input(x: Shape, cfg: &LocalContextConfig) -> Result<()> {
    if x.channels != cfg.base_channels {
        return Err(Error::invalid(
            "multi_scale_local_context",
            format!("input {x} does not have {} channels", cfg.base_channels),
        ));
    }
    Ok(())
}

/// The concatenated `(B, 3·S·C, H, W)` feature tensor.
pub fn local_context_features<T: Scalar>(
    x: &Tensor<T>,
    cfg: &LocalContextConfig,
    weights: &LocalContextWeights<T>,
) -> Result<Tensor<T>> {
    weights.check(cfg)?;
    check_input(x.shape(), cfg)?;
    let y = tensor::conv2d(x, &weights.projection, None, ConvParams::pointwise())?;
    let mut branches = vec![y];
    for (w, &k) in weights.depthwise.iter().zip(&cfg.dw_kernels) {
        let dw = tensor::conv2d(&branches[0], w, None, ConvParams::same(k, 1, cfg.projected_channels()))?;
        branches.push(dw);
    }
    let refs: Vec<&Tensor<T>> = branches.iter().collect();
    tensor::concat_channels(&refs)
}

/// Regroups concatenated features into query, key and value tensors.
pub fn split_qkv<T: Scalar>(features: &Tensor<T>, cfg: &LocalContextConfig) -> Result<QkvBundle<T>> {
    if features.shape().channels != cfg.qkv_channels() {
        return Err(Error::invalid(
            "split_qkv",
            format!("{} does not have {} channels", features.shape(), cfg.qkv_channels()),
        ));
    }
    let c = cfg.base_channels;
    let role = |r: usize| -> Result<Tensor<T>> {
        let parts = (0..cfg.scales)
            .map(|s| tensor::slice_channels(features, (3 * s + r) * c, c))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        tensor::concat_channels(&refs)
    };
    QkvBundle::new(role(0)?, role(1)?, role(2)?)
}

pub fn multi_scale_local_context<T: Scalar>(
    x: &Tensor<T>,
    cfg: &LocalContextConfig,
    weights: &LocalContextWeights<T>,
) -> Result<QkvBundle<T>> {
    split_qkv(&local_context_features(x, cfg, weights)?, cfg)
}

/// Records the local context encoder on `g`, returning `[q, k, v]` nodes.
pub fn multi_scale_local_context_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    cfg: &LocalContextConfig,
    projection: NodeId,
    depthwise: &[NodeId],
) -> Result<[NodeId; 3]> {
    cfg.validate()?;
    check_input(g.value(x).shape(), cfg)?;
    if depthwise.len() != cfg.dw_kernels.len() {
        return Err(Error::Config(format!(
            "{} depthwise weights for {} kernels",
            depthwise.len(),
            cfg.dw_kernels.len()
        )));
    }
    let y = g.conv2d(x, projection, None, ConvParams::pointwise())?;
    let mut branches = vec![y];
    for (&w, &k) in depthwise.iter().zip(&cfg.dw_kernels) {
        branches.push(g.conv2d(y, w, None, ConvParams::same(k, 1, cfg.projected_channels()))?);
    }
    let features = g.concat_channels(&branches)?;
    let c = cfg.base_channels;
    let mut roles = [features; 3];
    for (r, slot) in roles.iter_mut().enumerate() {
        let parts = (0..cfg.scales)
            .map(|s| g.slice_channels(features, (3 * s + r) * c, c))
            .collect::<Result<Vec<_>>>()?;
        *slot = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_channels(&parts)?
        };
    }
    Ok(roles)
}
