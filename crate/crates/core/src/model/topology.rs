use std::fmt;

use serde::Serialize;

use super::config::VariantConfig;
use crate::tensor::{ConvParams, Shape};

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BlockKind {
    /// 3×3 stride-2 convolution from RGB, normalization, ReLU.
    StemConv { out: usize },
    /// Inverted residual: pointwise expand, depthwise 3×3, pointwise project.
    MbConv {
        cin: usize,
        cout: usize,
        stride: usize,
        expansion: usize,
    },
    /// Local context, ReduceFormer attention, pointwise projection with residual.
    ReduceFormer { channels: usize },
    Head {
        cin: usize,
        widths: Vec<usize>,
        classes: usize,
    },
}

impl BlockKind {
    pub fn label(&self) -> &'static str {
        match self {
            BlockKind::StemConv { .. } => "stem_conv",
            BlockKind::MbConv { .. } => "mbconv",
            BlockKind::ReduceFormer { .. } => "reduceformer",
            BlockKind::Head { .. } => "head",
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            BlockKind::StemConv { out } => *out,
            BlockKind::MbConv { cout, .. } => *cout,
            BlockKind::ReduceFormer { channels } => *channels,
            BlockKind::Head { classes, .. } => *classes,
        }
    }

    pub fn stride(&self) -> usize {
        match self {
            BlockKind::StemConv { .. } => 2,
            BlockKind::MbConv { stride, .. } => *stride,
            _ => 1,
        }
    }
}

/// One entry of a model's block sequence.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockDesc {
    pub name: String,
    /// 0 = stem, 1..=4 = stages, 5 = head.
    pub stage: usize,
    pub kind: BlockKind,
}

impl fmt::Display for BlockDesc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.name, self.kind.label())
    }
}

pub const HEAD_STAGE: usize = 5;

pub fn build_topology(cfg: &VariantConfig) -> Vec<BlockDesc> {
    let ch = cfg.stage_channels;
    let e = cfg.mbconv_expansion;
    let mut blocks = vec![
        BlockDesc {
            name: "stem.conv".into(),
            stage: 0,
            kind: BlockKind::StemConv { out: ch[0] },
        },
        BlockDesc {
            name: "stem.mb".into(),
            stage: 0,
            kind: BlockKind::MbConv {
                cin: ch[0],
                cout: ch[0],
                stride: 1,
                expansion: e,
            },
        },
    ];
    for s in 1..=4 {
        let (cin, c) = (ch[s - 1], ch[s]);
        blocks.push(BlockDesc {
            name: format!("stage{s}.down"),
            stage: s,
            kind: BlockKind::MbConv {
                cin,
                cout: c,
                stride: 2,
                expansion: e,
            },
        });
        for i in 0..cfg.stage_depths[s - 1] {
            blocks.push(BlockDesc {
                name: format!("stage{s}.block{i}.mb"),
                stage: s,
                kind: BlockKind::MbConv {
                    cin: c,
                    cout: c,
                    stride: 1,
                    expansion: e,
                },
            });
            if cfg.attn_stages.contains(&s) {
                blocks.push(BlockDesc {
                    name: format!("stage{s}.block{i}.rf"),
                    stage: s,
                    kind: BlockKind::ReduceFormer { channels: c },
                });
            }
        }
    }
    blocks.push(BlockDesc {
        name: "head".into(),
        stage: HEAD_STAGE,
        kind: BlockKind::Head {
            cin: ch[4],
            widths: cfg.head_widths.clone(),
            classes: cfg.num_classes,
        },
    });
    blocks
}

/// A convolution layer of a block: parameter prefix, weight shape, params, bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub weight: Shape,
    pub params: ConvParams,
    pub bias: bool,
    /// Followed by a per-channel affine normalization `{name}_norm`.
    pub norm: bool,
    pub relu: bool,
}

impl ConvLayer {
    fn new(name: String, cout: usize, cin: usize, k: usize, stride: usize, groups: usize) -> Self {
        Self {
            name,
            weight: Shape::new(cout, cin / groups, k, k),
            params: ConvParams::same(k, stride, groups),
            bias: false,
            norm: true,
            relu: true,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.batch
    }
}

pub(crate) fn stem_layers(name: &str, out: usize) -> Vec<ConvLayer> {
    vec![ConvLayer::new(name.to_string(), out, 3, 3, 2, 1)]
}

pub(crate) fn mbconv_layers(name: &str, cin: usize, cout: usize, stride: usize, expansion: usize) -> Vec<ConvLayer> {
    let hidden = cin * expansion;
    let mut layers = Vec::with_capacity(3);
    if expansion != 1 {
        layers.push(ConvLayer::new(format!("{name}.expand"), hidden, cin, 1, 1, 1));
    }
    layers.push(ConvLayer::new(format!("{name}.dw"), hidden, hidden, 3, stride, hidden));
    layers.push(ConvLayer {
        relu: false,
        ..ConvLayer::new(format!("{name}.project"), cout, hidden, 1, 1, 1)
    });
    layers
}

pub(crate) fn mbconv_residual(cin: usize, cout: usize, stride: usize) -> bool {
    stride == 1 && cin == cout
}
