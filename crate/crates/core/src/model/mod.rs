//! ReduceFormer classification backbones: variant configs, block topology,
//! forward pass, analytic cost model, weight files and toy training.

mod blocks;
mod config;
mod cost;
mod params;
mod topology;
mod train;
mod weights;

use indexmap::IndexMap;

pub use blocks::reduce_former_block_graph;
pub use config::{VariantConfig, VariantName, TOTAL_STRIDE};
pub use cost::{block_costs, count_macs, count_params, stage_summary, BlockCost, StageSummary};
pub use params::{block_params, reduce_former_block_params, Init, ParamSpec};
pub use topology::{build_topology, BlockDesc, BlockKind, HEAD_STAGE};
pub use train::{train_toy, ToyData};
pub use weights::{decode_weights, encode_weights, load_weights, save_weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Shape, Tensor};

/// Parameter name → graph node.
#[derive(Debug, Clone, Default)]
pub struct ParamNodes {
    nodes: IndexMap<String, NodeId>,
}

impl ParamNodes {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, id: NodeId) {
        self.nodes.insert(name.into(), id);
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> + '_ {
        self.nodes.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Samples a tensor for every spec.
pub fn init_params(specs: &[ParamSpec], rng: &mut Rng) -> IndexMap<String, Tensor<f32>> {
    specs
        .iter()
        .map(|s| {
            let t = match s.init {
                Init::FanIn => {
                    let fan_in = s.shape.channels * s.shape.height * s.shape.width;
                    let bound = (6.0 / fan_in as f64).sqrt();
                    rng.tensor(s.shape, -bound, bound)
                }
                Init::Ones => Tensor::full(s.shape, 1.0),
                Init::Zeros => Tensor::zeros(s.shape),
            };
            (s.name.clone(), t)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Model {
    config: VariantConfig,
    topology: Vec<BlockDesc>,
    params: IndexMap<String, Tensor<f32>>,
}

/// Builds a randomly initialized model.
pub fn build_variant(config: &VariantConfig, rng: &mut Rng) -> Result<Model> {
    config.validate()?;
    let topology = build_topology(config);
    let params = init_params(&param_specs(config, &topology), rng);
    Ok(Model {
        config: config.clone(),
        topology,
        params,
    })
}

fn param_specs(config: &VariantConfig, topology: &[BlockDesc]) -> Vec<ParamSpec> {
    topology.iter().flat_map(|b| block_params(b, config)).collect()
}

impl Model {
    /// Assembles a model from a parameter table, which must hold exactly
    /// the parameters the config calls for with matching shapes.
    pub fn from_params(config: VariantConfig, mut table: IndexMap<String, Tensor<f32>>) -> Result<Self> {
        config.validate()?;
        let topology = build_topology(&config);
        let specs = param_specs(&config, &topology);
        let mut params = IndexMap::with_capacity(specs.len());
        for spec in &specs {
            let t = table
                .shift_remove(&spec.name)
                .ok_or_else(|| Error::MissingParameter(spec.name.clone()))?;
            if t.shape() != spec.shape {
                return Err(Error::ShapeMismatch {
                    op: "Model::from_params",
                    lhs: spec.shape,
                    rhs: t.shape(),
                });
            }
            params.insert(spec.name.clone(), t);
        }
        if let Some(extra) = table.keys().next() {
            return Err(Error::Malformed(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self {
            config,
            topology,
            params,
        })
    }

    pub fn config(&self) -> &VariantConfig {
        &self.config
    }

    pub fn topology(&self) -> &[BlockDesc] {
        &self.topology
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<f32>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> + '_ {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<f32>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    /// Expected `(B, 3, H, W)` input; `H` and `W` must be multiples of the
    /// total stride.
    pub fn check_input(&self, x: Shape) -> Result<()> {
        if x.channels != 3 {
            return Err(Error::invalid("forward", format!("input {x} must have 3 channels")));
        }
        if x.height == 0 || x.width == 0 || !x.height.is_multiple_of(TOTAL_STRIDE) || !x.width.is_multiple_of(TOTAL_STRIDE) {
            return Err(Error::invalid(
                "forward",
                format!(
                    "input {x}: spatial dims must be positive multiples of the total stride {TOTAL_STRIDE}"
                ),
            ));
        }
        Ok(())
    }

    /// Records every parameter on `g`, as leaves when `trainable`.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, trainable: bool) -> ParamNodes {
        let mut nodes = ParamNodes::new();
        for (name, t) in &self.params {
            let v = t.cast::<T>();
            let id = if trainable { g.leaf(v) } else { g.constant(v) };
            nodes.insert(name.clone(), id);
        }
        nodes
    }

    /// Records the forward pass, one scope per block named after it.
    /// Returns `(B, num_classes, 1, 1)` logits.
    pub fn forward_graph<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId, params: &ParamNodes) -> Result<NodeId> {
        self.check_input(g.value(x).shape())?;
        let mut y = x;
        for desc in &self.topology {
            g.set_scope(Some(&desc.name));
            let out = blocks::block_graph(g, y, params, desc, &self.config);
            g.set_scope(None);
            y = out?;
        }
        Ok(y)
    }

    /// Inference: `(B, 3, H, W)` images to `(B, num_classes, 1, 1)` logits.
    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_input(x.shape())?;
        let mut g = Graph::<f32>::new();
        let params = self.bind(&mut g, false);
        let input = g.constant(x.clone());
        let out = self.forward_graph(&mut g, input, &params)?;
        Ok(g.into_value(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topology_b1() {
        let t = build_topology(&VariantConfig::b1());
        // stem conv + stem mbconv, 4 downsamples, 2+3 mbconv, 3+4 (mbconv, rf) pairs, head
        assert_eq!(t.len(), 2 + 4 + 5 + 14 + 1);
        let rf: Vec<_> = t.iter().filter(|b| matches!(b.kind, BlockKind::ReduceFormer { .. })).collect();
        assert_eq!(rf.len(), 7);
        assert!(rf.iter().all(|b| b.stage >= 3));
        assert_eq!(t.last().unwrap().stage, HEAD_STAGE);
    }

    #[test]
    fn toy_forward_shape() {
        let cfg = VariantConfig::toy(5);
        let m = build_variant(&cfg, &mut Rng::new(1)).unwrap();
        let x = Rng::new(2).tensor::<f32>(Shape::new(2, 3, 32, 32), -1.0, 1.0);
        let y = m.forward(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 5, 1, 1));
        assert!(y.is_finite());
    }

    #[test]
    fn rejects_bad_resolution() {
        let m = build_variant(&VariantConfig::toy(5), &mut Rng::new(1)).unwrap();
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 48, 32));
        assert!(m.forward(&x).is_err());
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 32, 32));
        assert!(m.forward(&x).is_err());
    }

    #[test]
    fn from_params_checks_table() {
        let cfg = VariantConfig::toy(3);
        let m = build_variant(&cfg, &mut Rng::new(1)).unwrap();
        let mut table = m.params().clone();
        assert!(Model::from_params(cfg.clone(), table.clone()).is_ok());
        table.insert("extra".into(), Tensor::scalar(0.0));
        assert!(Model::from_params(cfg.clone(), table.clone()).is_err());
        table.shift_remove("extra");
        table.shift_remove("head.classifier.bias");
        assert!(matches!(
            Model::from_params(cfg, table),
            Err(Error::MissingParameter(_))
        ));
    }

    #[test]
    fn attention_scopes_free_of_matmul_and_exp() {
        let m = build_variant(&VariantConfig::toy(3), &mut Rng::new(1)).unwrap();
        let mut g = Graph::<f32>::new();
        let p = m.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(Shape::new(1, 3, 32, 32)));
        m.forward_graph(&mut g, x, &p).unwrap();
        let scoped: Vec<_> = g.nodes_in_scope("stage3.").collect();
        assert!(!scoped.is_empty());
        assert!(scoped.iter().all(|n| !n.kind.is_matrix_product() && !n.kind.is_exponential()));
    }
}
