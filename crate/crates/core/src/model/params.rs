//! Parameter naming, shapes and initialization per block.

use super::topology::{mbconv_layers, mbconv_residual, stem_layers, BlockDesc, BlockKind, ConvLayer};
use super::VariantConfig;
use crate::attention::LocalContextConfig;
use crate::tensor::{ConvParams, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform on `±sqrt(6 / fan_in)`.
    FanIn,
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

fn vector(c: usize) -> Shape {
    Shape::new(1, c, 1, 1)
}

fn push_layer(out: &mut Vec<ParamSpec>, layer: &ConvLayer) {
    out.push(ParamSpec {
        name: format!("{}.weight", layer.name),
        shape: layer.weight,
        init: Init::FanIn,
    });
    let c = layer.out_channels();
    if layer.bias {
        out.push(ParamSpec {
            name: format!("{}.bias", layer.name),
            shape: vector(c),
            init: Init::Zeros,
        });
    }
    if layer.norm {
        out.push(ParamSpec {
            name: format!("{}.norm.scale", layer.name),
            shape: vector(c),
            init: Init::Ones,
        });
        out.push(ParamSpec {
            name: format!("{}.norm.shift", layer.name),
            shape: vector(c),
            init: Init::Zeros,
        });
    }
}

/// Convolution layers of a ReduceFormer block, in forward order:
/// qkv projection, depthwise branches, output projection.
pub(crate) fn reduce_former_layers(name: &str, lc: &LocalContextConfig) -> Vec<ConvLayer> {
    let c = lc.base_channels;
    let mut layers = vec![ConvLayer {
        name: format!("{name}.qkv"),
        weight: lc.projection_shape(),
        params: ConvParams::pointwise(),
        bias: false,
        norm: false,
        relu: false,
    }];
    for (i, &k) in lc.dw_kernels.iter().enumerate() {
        layers.push(ConvLayer {
            name: format!("{name}.dw{i}"),
            weight: lc.depthwise_shape(k),
            params: ConvParams::same(k, 1, lc.projected_channels()),
            bias: false,
            norm: false,
            relu: false,
        });
    }
    layers.push(ConvLayer {
        name: format!("{name}.proj"),
        weight: Shape::new(c, lc.head_channels(), 1, 1),
        params: ConvParams::pointwise(),
        bias: false,
        norm: true,
        relu: false,
    });
    layers
}

/// Head layers: the pre-pool conv (if any), hidden linears, classifier.
/// The bool marks layers applied after pooling.
pub(crate) fn head_layers(cin: usize, widths: &[usize], classes: usize) -> Vec<(ConvLayer, bool)> {
    let pointwise = |name: String, cout: usize, cin: usize| ConvLayer {
        name,
        weight: Shape::new(cout, cin, 1, 1),
        params: ConvParams::pointwise(),
        bias: false,
        norm: true,
        relu: true,
    };
    let mut layers = Vec::new();
    let mut c = cin;
    if let Some((&first, rest)) = widths.split_first() {
        layers.push((pointwise("head.conv".into(), first, c), false));
        c = first;
        for (i, &w) in rest.iter().enumerate() {
            layers.push((pointwise(format!("head.fc{i}"), w, c), true));
            c = w;
        }
    }
    layers.push((
        ConvLayer {
            bias: true,
            norm: false,
            relu: false,
            ..pointwise("head.classifier".into(), classes, c)
        },
        true,
    ));
    layers
}

pub(crate) fn block_layers(desc: &BlockDesc, cfg: &VariantConfig) -> Vec<ConvLayer> {
    match &desc.kind {
        BlockKind::StemConv { out } => stem_layers(&desc.name, *out),
        BlockKind::MbConv {
            cin,
            cout,
            stride,
            expansion,
        } => mbconv_layers(&desc.name, *cin, *cout, *stride, *expansion),
        BlockKind::ReduceFormer { channels } => reduce_former_layers(&desc.name, &cfg.local_context(*channels)),
        BlockKind::Head { cin, widths, classes } => {
            head_layers(*cin, widths, *classes).into_iter().map(|(l, _)| l).collect()
        }
    }
}

fn is_residual(kind: &BlockKind) -> bool {
    match *kind {
        BlockKind::MbConv { cin, cout, stride, .. } => mbconv_residual(cin, cout, stride),
        BlockKind::ReduceFormer { .. } => true,
        _ => false,
    }
}

/// Residual branches start with a zero norm scale on their last layer, so
/// every residual block is the identity at initialization.
fn zero_last_scale(out: &mut [ParamSpec], last: &ConvLayer) {
    let name = format!("{}.norm.scale", last.name);
    if let Some(spec) = out.iter_mut().find(|s| s.name == name) {
        spec.init = Init::Zeros;
    }
}

/// All parameters of a block, in a fixed order.
pub fn block_params(desc: &BlockDesc, cfg: &VariantConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let layers = block_layers(desc, cfg);
    for layer in &layers {
        push_layer(&mut out, layer);
    }
    if is_residual(&desc.kind) {
        zero_last_scale(&mut out, layers.last().expect("residual blocks have layers"));
    }
    out
}

/// Parameters of a standalone ReduceFormer block named `name`.
pub fn reduce_former_block_params(name: &str, lc: &LocalContextConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let layers = reduce_former_layers(name, lc);
    for layer in &layers {
        push_layer(&mut out, layer);
    }
    zero_last_scale(&mut out, layers.last().expect("projection layer"));
    out
}
