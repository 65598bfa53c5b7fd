//! Analytic cost model mirroring the instrumented kernels operation for
//! operation, so the instrumented counters of a forward pass equal these
//! numbers exactly.

use serde::Serialize;

use super::params::{block_params, head_layers, reduce_former_layers};
use super::topology::{build_topology, mbconv_layers, mbconv_residual, stem_layers, BlockDesc, BlockKind, ConvLayer};
use super::{Model, VariantConfig, HEAD_STAGE};
use crate::attention::{flop_count_attention, AttentionKind};
use crate::cost::CostReport;
use crate::error::{Error, Result};
use crate::tensor::Shape;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockCost {
    pub name: String,
    pub stage: usize,
    pub kind: &'static str,
    pub out_shape: [usize; 4],
    pub cost: CostReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageSummary {
    pub stage: String,
    pub blocks: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub params: u64,
    pub macs: u64,
    pub ew_flops: u64,
}

fn layer_cost(x: Shape, layer: &ConvLayer) -> Result<(Shape, CostReport)> {
    let w = layer.weight;
    let p = layer.params;
    let (oh, ow) = match (p.output_len(x.height, w.height), p.output_len(x.width, w.width)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => return Err(Error::invalid("block_costs", format!("{} does not fit input {x}", layer.name))),
    };
    let out = Shape::new(x.batch, w.batch, oh, ow);
    let n = out.numel() as u64;
    let mut ew = 0;
    if layer.bias {
        ew += n;
    }
    if layer.norm {
        ew += 2 * n;
    }
    if layer.relu {
        ew += n;
    }
    let cost = CostReport {
        macs: n * (w.channels * w.height * w.width) as u64,
        ew_flops: ew,
        ..Default::default()
    };
    Ok((out, cost))
}

fn chain(x: Shape, layers: &[ConvLayer]) -> Result<(Shape, CostReport)> {
    let mut s = x;
    let mut total = CostReport::default();
    for l in layers {
        let (out, c) = layer_cost(s, l)?;
        s = out;
        total = total + c;
    }
    Ok((s, total))
}

fn block_cost(x: Shape, desc: &BlockDesc, cfg: &VariantConfig) -> Result<(Shape, CostReport)> {
    let (out, mut cost) = match &desc.kind {
        BlockKind::StemConv { out } => chain(x, &stem_layers(&desc.name, *out))?,
        &BlockKind::MbConv {
            cin,
            cout,
            stride,
            expansion,
        } => {
            let (out, mut c) = chain(x, &mbconv_layers(&desc.name, cin, cout, stride, expansion))?;
            if mbconv_residual(cin, cout, stride) {
                c.ew_flops += out.numel() as u64;
            }
            (out, c)
        }
        BlockKind::ReduceFormer { channels } => {
            let lc = cfg.local_context(*channels);
            let layers = reduce_former_layers(&desc.name, &lc);
            let (proj, convs) = layers.split_last().expect("qkv and projection layers");
            let (qkv, mut c) = layer_cost(x, &convs[0])?;
            for dw in &convs[1..] {
                c = c + layer_cost(qkv, dw)?.1;
            }
            let attn = flop_count_attention(AttentionKind::ReduceFormer, x.batch, lc.head_channels(), x.tokens());
            let (out, pc) = layer_cost(x.with_channels(lc.head_channels()), proj)?;
            c = c + attn + pc;
            c.ew_flops += out.numel() as u64;
            (out, c)
        }
        BlockKind::Head { cin, widths, classes } => {
            let mut s = x;
            let mut c = CostReport::default();
            let mut pooled = false;
            for (layer, post_pool) in head_layers(*cin, widths, *classes) {
                if post_pool && !pooled {
                    c.ew_flops += (s.numel() + s.batch * s.channels) as u64;
                    s = Shape::new(s.batch, s.channels, 1, 1);
                    pooled = true;
                }
                let (out, lc) = layer_cost(s, &layer)?;
                s = out;
                c = c + lc;
            }
            (s, c)
        }
    };
    cost.params = block_params(desc, cfg).iter().map(|p| p.shape.numel() as u64).sum();
    Ok((out, cost))
}

/// Per-block costs of a forward pass on a `(batch, 3, height, width)` input.
pub fn block_costs(cfg: &VariantConfig, batch: usize, height: usize, width: usize) -> Result<Vec<BlockCost>> {
    cfg.validate()?;
    let mut s = Shape::new(batch, 3, height, width);
    build_topology(cfg)
        .iter()
        .map(|desc| {
            let (out, cost) = block_cost(s, desc, cfg)?;
            s = out;
            Ok(BlockCost {
                name: desc.name.clone(),
                stage: desc.stage,
                kind: desc.kind.label(),
                out_shape: out.dims(),
                cost,
            })
        })
        .collect()
}

pub fn count_params(model: &Model) -> u64 {
    model.params().values().map(|t| t.numel() as u64).sum()
}

/// Multiply-accumulates of one image at `resolution × resolution`.
pub fn count_macs(model: &Model, resolution: usize) -> Result<u64> {
    model.check_input(Shape::new(1, 3, resolution, resolution))?;
    Ok(block_costs(model.config(), 1, resolution, resolution)?
        .iter()
        .map(|b| b.cost.macs)
        .sum())
}

/// Block costs grouped by stage: stem, stage1..stage4, head.
pub fn stage_summary(blocks: &[BlockCost]) -> Vec<StageSummary> {
    (0..=HEAD_STAGE)
        .filter_map(|stage| {
            let members: Vec<_> = blocks.iter().filter(|b| b.stage == stage).collect();
            let last = members.last()?;
            let label = match stage {
                0 => "stem".to_string(),
                HEAD_STAGE => "head".to_string(),
                s => format!("stage{s}"),
            };
            Some(StageSummary {
                stage: label,
                blocks: members.len(),
                channels: last.out_shape[1],
                height: last.out_shape[2],
                width: last.out_shape[3],
                params: members.iter().map(|b| b.cost.params).sum(),
                macs: members.iter().map(|b| b.cost.macs).sum(),
                ew_flops: members.iter().map(|b| b.cost.ew_flops).sum(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counter;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    #[test]
    fn walker_params_match_table() {
        for cfg in [VariantConfig::b1(), VariantConfig::toy(4)] {
            let m = super::super::build_variant(&cfg, &mut Rng::new(0)).unwrap();
            let walked: u64 = block_costs(&cfg, 1, 224, 224).unwrap().iter().map(|b| b.cost.params).sum();
            assert_eq!(walked, count_params(&m));
        }
    }

    #[test]
    fn walker_matches_instrumented_forward() {
        let mut cfg = VariantConfig::toy(4);
        cfg.head_widths = vec![24, 12];
        cfg.scales = 3;
        cfg.dw_kernels = vec![3, 5];
        let m = super::super::build_variant(&cfg, &mut Rng::new(0)).unwrap();
        let x = Tensor::<f32>::zeros(Shape::new(2, 3, 64, 32));
        let (_, counts) = counter::measure(|| m.forward(&x).unwrap());
        let blocks = block_costs(&cfg, 2, 64, 32).unwrap();
        let macs: u64 = blocks.iter().map(|b| b.cost.macs).sum();
        let ew: u64 = blocks.iter().map(|b| b.cost.ew_flops).sum();
        assert_eq!(counts.macs, macs);
        assert_eq!(counts.flops, ew);
    }

    #[test]
    fn stage_summary_totals() {
        let blocks = block_costs(&VariantConfig::b1(), 1, 224, 224).unwrap();
        let stages = stage_summary(&blocks);
        assert_eq!(stages.len(), 6);
        assert_eq!(stages[4].channels, 256);
        assert_eq!((stages[4].height, stages[4].width), (7, 7));
        let total: u64 = stages.iter().map(|s| s.macs).sum();
        assert_eq!(total, blocks.iter().map(|b| b.cost.macs).sum::<u64>());
    }
}
