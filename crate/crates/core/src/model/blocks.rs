//! Graph builders for the model's blocks.

use super::params::{head_layers, reduce_former_layers};
use super::topology::{mbconv_layers, mbconv_residual, stem_layers, BlockDesc, BlockKind, ConvLayer};
use super::{ParamNodes, VariantConfig};
use crate::attention::{multi_scale_local_context_graph, reduce_former_attention_graph, LocalContextConfig};
use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::tensor::Scalar;

/// conv → bias → affine norm → ReLU, each stage as configured on `layer`.
fn apply_layer<T: Scalar>(g: &mut Graph<T>, x: NodeId, layer: &ConvLayer, p: &ParamNodes) -> Result<NodeId> {
    let w = p.get(&format!("{}.weight", layer.name))?;
    let bias = if layer.bias {
        Some(p.get(&format!("{}.bias", layer.name))?)
    } else {
        None
    };
    let mut y = g.conv2d(x, w, bias, layer.params)?;
    if layer.norm {
        let scale = p.get(&format!("{}.norm.scale", layer.name))?;
        let shift = p.get(&format!("{}.norm.shift", layer.name))?;
        y = g.channel_affine(y, scale, shift)?;
    }
    if layer.relu {
        y = g.relu(y);
    }
    Ok(y)
}

fn mbconv_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    p: &ParamNodes,
    name: &str,
    (cin, cout, stride, expansion): (usize, usize, usize, usize),
) -> Result<NodeId> {
    let mut y = x;
    for layer in mbconv_layers(name, cin, cout, stride, expansion) {
        y = apply_layer(g, y, &layer, p)?;
    }
    if mbconv_residual(cin, cout, stride) {
        y = g.add(y, x)?;
    }
    Ok(y)
}

/// One ReduceFormer block: multi-scale local context, ReduceFormer
/// attention, pointwise projection with normalization, residual add.
///
/// Parameters are looked up under `name` as listed by
/// [`reduce_former_block_params`](super::reduce_former_block_params).
pub fn reduce_former_block_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    p: &ParamNodes,
    name: &str,
    lc: &LocalContextConfig,
    eps: T,
) -> Result<NodeId> {
    let layers = reduce_former_layers(name, lc);
    let (proj, convs) = layers.split_last().expect("qkv and projection layers");
    let qkv_w = p.get(&format!("{}.weight", convs[0].name))?;
    let dw = convs[1..]
        .iter()
        .map(|l| p.get(&format!("{}.weight", l.name)))
        .collect::<Result<Vec<_>>>()?;
    let [q, k, v] = multi_scale_local_context_graph(g, x, lc, qkv_w, &dw)?;
    let o = reduce_former_attention_graph(g, q, k, v, eps)?;
    let y = apply_layer(g, o, proj, p)?;
    g.add(y, x)
}

fn head_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    p: &ParamNodes,
    (cin, widths, classes): (usize, &[usize], usize),
) -> Result<NodeId> {
    let mut y = x;
    let mut pooled = false;
    for (layer, post_pool) in head_layers(cin, widths, classes) {
        if post_pool && !pooled {
            let s = g.value(y).shape();
            let sum = g.global_sum(y);
            y = g.scale(sum, T::from_f64(1.0 / (s.height * s.width) as f64));
            pooled = true;
        }
        y = apply_layer(g, y, &layer, p)?;
    }
    Ok(y)
}

pub(crate) fn block_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    p: &ParamNodes,
    desc: &BlockDesc,
    cfg: &VariantConfig,
) -> Result<NodeId> {
    match &desc.kind {
        BlockKind::StemConv { out } => apply_layer(g, x, &stem_layers(&desc.name, *out)[0], p),
        BlockKind::MbConv {
            cin,
            cout,
            stride,
            expansion,
        } => mbconv_graph(g, x, p, &desc.name, (*cin, *cout, *stride, *expansion)),
        BlockKind::ReduceFormer { channels } => reduce_former_block_graph(
            g,
            x,
            p,
            &desc.name,
            &cfg.local_context(*channels),
            T::from_f64(cfg.attn_eps),
        ),
        BlockKind::Head { cin, widths, classes } => head_graph(g, x, p, (*cin, widths, *classes)),
    }
}
