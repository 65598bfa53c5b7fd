//! Direct 2-D cross-correlation (no kernel flip) over NCHW tensors.
//!
//! Weights are `(C_out, C_in / groups, kh, kw)`, stored in a [`Tensor`] whose
//! batch axis is the output channel. Bias is `(1, C_out, 1, 1)`.

use serde::{Deserialize, Serialize};

use super::{Scalar, Shape, Tensor};
use crate::counter;
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvParams {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    /// Stride 1, no padding, dense: a pointwise convolution for 1×1 kernels.
    pub const fn pointwise() -> Self {
        Self::new(1, 0, 1)
    }

    /// Padding that keeps the spatial size for an odd `kernel` at stride 1.
    pub const fn same(kernel: usize, stride: usize, groups: usize) -> Self {
        Self::new(stride, kernel / 2, groups)
    }

    pub fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        (padded >= kernel && self.stride > 0).then(|| (padded - kernel) / self.stride + 1)
    }
}

struct Geometry {
    in_shape: Shape,
    out_shape: Shape,
    kh: usize,
    kw: usize,
    cin_per_group: usize,
    cout_per_group: usize,
}

fn geometry(input: Shape, weight: Shape, bias: Option<Shape>, p: ConvParams) -> Result<Geometry> {
    let op = "conv2d";
    if p.stride == 0 || p.groups == 0 {
        return Err(Error::invalid(op, "stride and groups must be positive"));
    }
    if !input.channels.is_multiple_of(p.groups) {
        return Err(Error::invalid(
            op,
            format!("groups {} do not divide {} input channels", p.groups, input.channels),
        ));
    }
    let cout = weight.batch;
    if !cout.is_multiple_of(p.groups) {
        return Err(Error::invalid(
            op,
            format!("groups {} do not divide {cout} output channels", p.groups),
        ));
    }
    let cin_per_group = input.channels / p.groups;
    if weight.channels != cin_per_group {
        return Err(Error::ShapeMismatch {
            op,
            lhs: input,
            rhs: weight,
        });
    }
    let (kh, kw) = (weight.height, weight.width);
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::invalid(op, format!("kernel {kh}x{kw} must be odd")));
    }
    if let Some(b) = bias {
        if b != Shape::new(1, cout, 1, 1) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: weight,
                rhs: b,
            });
        }
    }
    let (Some(oh), Some(ow)) = (p.output_len(input.height, kh), p.output_len(input.width, kw))
    else {
        return Err(Error::invalid(
            op,
            format!("kernel {kh}x{kw} larger than padded input {input}"),
        ));
    };
    Ok(Geometry {
        in_shape: input,
        out_shape: Shape::new(input.batch, cout, oh, ow),
        kh,
        kw,
        cin_per_group,
        cout_per_group: cout / p.groups,
    })
}

/// Output positions `o` in `0..out_len` whose input tap `o*stride + k - pad` lies in `0..in_len`.
fn valid_range(k: usize, p: ConvParams, in_len: usize, out_len: usize) -> std::ops::Range<usize> {
    let lo = if p.padding > k {
        (p.padding - k).div_ceil(p.stride)
    } else {
        0
    };
    if in_len + p.padding < k + 1 {
        return 0..0;
    }
    let hi = ((in_len - 1 + p.padding - k) / p.stride + 1).min(out_len);
    lo.min(hi)..hi
}

pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    p: ConvParams,
) -> Result<Tensor<T>> {
    let geo = geometry(x.shape(), weight.shape(), bias.map(|b| b.shape()), p)?;
    let (ins, outs) = (geo.in_shape, geo.out_shape);
    let (oh, ow) = (outs.height, outs.width);
    let taps = geo.cin_per_group * geo.kh * geo.kw;
    counter::add_macs(outs.numel() * taps);
    if bias.is_some() {
        counter::add_flops(outs.numel());
    }
    let wdata = weight.data();
    let mut out = vec![T::zero(); outs.numel()];
    par::for_each_chunk(&mut out, oh * ow, |plane, dst| {
        let (b, co) = (plane / outs.channels, plane % outs.channels);
        if let Some(bias) = bias {
            dst.fill(bias.data()[co]);
        }
        let group = co / geo.cout_per_group;
        for cl in 0..geo.cin_per_group {
            let src = x.plane(b, group * geo.cin_per_group + cl);
            for ky in 0..geo.kh {
                let rows = valid_range(ky, p, ins.height, oh);
                for kx in 0..geo.kw {
                    let w = wdata[((co * geo.cin_per_group + cl) * geo.kh + ky) * geo.kw + kx];
                    let cols = valid_range(kx, p, ins.width, ow);
                    if cols.is_empty() {
                        continue;
                    }
                    for oy in rows.clone() {
                        let iy = oy * p.stride + ky - p.padding;
                        let src_row = &src[iy * ins.width..(iy + 1) * ins.width];
                        let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                        if p.stride == 1 {
                            let off = cols.start + kx - p.padding;
                            let n = cols.len();
                            for (o, &v) in dst_row[cols.clone()].iter_mut().zip(&src_row[off..off + n]) {
                                *o += w * v;
                            }
                        } else {
                            for ox in cols.clone() {
                                dst_row[ox] += w * src_row[ox * p.stride + kx - p.padding];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(Tensor::from_parts(outs, out))
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_backward_input<T: Scalar>(
    grad: &Tensor<T>,
    weight: &Tensor<T>,
    input_shape: Shape,
    p: ConvParams,
) -> Result<Tensor<T>> {
    let geo = geometry(input_shape, weight.shape(), None, p)?;
    let (ins, outs) = (geo.in_shape, geo.out_shape);
    if grad.shape() != outs {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward_input",
            lhs: outs,
            rhs: grad.shape(),
        });
    }
    let (oh, ow) = (outs.height, outs.width);
    let wdata = weight.data();
    let mut gx = vec![T::zero(); ins.numel()];
    par::for_each_chunk(&mut gx, ins.tokens(), |plane, dst| {
        let (b, ci) = (plane / ins.channels, plane % ins.channels);
        let (group, cl) = (ci / geo.cin_per_group, ci % geo.cin_per_group);
        for co in group * geo.cout_per_group..(group + 1) * geo.cout_per_group {
            let g = grad.plane(b, co);
            for ky in 0..geo.kh {
                let rows = valid_range(ky, p, ins.height, oh);
                for kx in 0..geo.kw {
                    let w = wdata[((co * geo.cin_per_group + cl) * geo.kh + ky) * geo.kw + kx];
                    let cols = valid_range(kx, p, ins.width, ow);
                    for oy in rows.clone() {
                        let iy = oy * p.stride + ky - p.padding;
                        let dst_row = &mut dst[iy * ins.width..(iy + 1) * ins.width];
                        let g_row = &g[oy * ow..(oy + 1) * ow];
                        for ox in cols.clone() {
                            dst_row[ox * p.stride + kx - p.padding] += w * g_row[ox];
                        }
                    }
                }
            }
        }
    });
    Ok(Tensor::from_parts(ins, gx))
}

/// Gradient of [`conv2d`] with respect to its weight.
pub fn conv2d_backward_weight<T: Scalar>(
    grad: &Tensor<T>,
    x: &Tensor<T>,
    weight_shape: Shape,
    p: ConvParams,
) -> Result<Tensor<T>> {
    let geo = geometry(x.shape(), weight_shape, None, p)?;
    let (ins, outs) = (geo.in_shape, geo.out_shape);
    if grad.shape() != outs {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward_weight",
            lhs: outs,
            rhs: grad.shape(),
        });
    }
    let (oh, ow) = (outs.height, outs.width);
    let per_co = geo.cin_per_group * geo.kh * geo.kw;
    let mut gw = vec![T::zero(); weight_shape.numel()];
    par::for_each_chunk(&mut gw, per_co, |co, dst| {
        let group = co / geo.cout_per_group;
        for (idx, o) in dst.iter_mut().enumerate() {
            let cl = idx / (geo.kh * geo.kw);
            let ky = (idx / geo.kw) % geo.kh;
            let kx = idx % geo.kw;
            let rows = valid_range(ky, p, ins.height, oh);
            let cols = valid_range(kx, p, ins.width, ow);
            let mut acc = T::zero();
            for b in 0..ins.batch {
                let src = x.plane(b, group * geo.cin_per_group + cl);
                let g = grad.plane(b, co);
                for oy in rows.clone() {
                    let iy = oy * p.stride + ky - p.padding;
                    for ox in cols.clone() {
                        acc += g[oy * ow + ox] * src[iy * ins.width + ox * p.stride + kx - p.padding];
                    }
                }
            }
            *o = acc;
        }
    });
    Ok(Tensor::from_parts(weight_shape, gw))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_pointwise() {
        let x = Tensor::<f32>::from_fn(Shape::new(1, 3, 4, 4), |i| i as f32 * 0.5 - 3.0);
        let w = Tensor::from_fn(Shape::new(3, 3, 1, 1), |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let zero_bias = Tensor::zeros(Shape::new(1, 3, 1, 1));
        let y = conv2d(&x, &w, Some(&zero_bias), ConvParams::pointwise()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn depthwise_ones_counts_taps() {
        let v = 1.5f32;
        let x = Tensor::full(Shape::new(1, 2, 5, 5), v);
        let w = Tensor::full(Shape::new(2, 1, 3, 3), 1.0f32);
        let y = conv2d(&x, &w, None, ConvParams::same(3, 1, 2)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 5, 5));
        for c in 0..2 {
            assert_eq!(y.get(0, c, 0, 0), 4.0 * v);
            assert_eq!(y.get(0, c, 4, 4), 4.0 * v);
            assert_eq!(y.get(0, c, 0, 2), 6.0 * v);
            assert_eq!(y.get(0, c, 2, 4), 6.0 * v);
            assert_eq!(y.get(0, c, 2, 2), 9.0 * v);
        }
    }

    #[test]
    fn strided_output_size() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 7, 8));
        let w = Tensor::zeros(Shape::new(4, 3, 3, 3));
        let y = conv2d(&x, &w, None, ConvParams::new(2, 1, 1)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 4, 4, 4));
    }

    #[test]
    fn rejects_bad_groups_and_kernels() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        let w = Tensor::zeros(Shape::new(3, 1, 3, 3));
        assert!(conv2d(&x, &w, None, ConvParams::new(1, 1, 2)).is_err());
        let even = Tensor::zeros(Shape::new(3, 3, 2, 2));
        assert!(conv2d(&x, &even, None, ConvParams::pointwise()).is_err());
        let wrong_cin = Tensor::zeros(Shape::new(3, 2, 1, 1));
        assert!(matches!(
            conv2d(&x, &wrong_cin, None, ConvParams::pointwise()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn valid_range_edges() {
        let p = ConvParams::new(1, 1, 1);
        assert_eq!(valid_range(0, p, 4, 4), 1..4);
        assert_eq!(valid_range(1, p, 4, 4), 0..4);
        assert_eq!(valid_range(2, p, 4, 4), 0..3);
        let s2 = ConvParams::new(2, 1, 1);
        assert_eq!(valid_range(0, s2, 5, 3), 1..3);
        assert_eq!(valid_range(2, s2, 5, 3), 0..2);
    }

    #[test]
    fn kernel_wider_than_input() {
        // 5x5 depthwise on 1x2 planes: only the centre taps overlap.
        let x = Tensor::<f64>::from_slice([1, 1, 1, 2], &[1.0, 2.0]).unwrap();
        let w = Tensor::from_fn(Shape::new(1, 1, 5, 5), |i| i as f64);
        let y = conv2d(&x, &w, None, ConvParams::same(5, 1, 1)).unwrap();
        // row ky = 2 holds taps 10..15; output ox reads input ix = ox + kx - 2
        assert_eq!(y.data(), &[12.0 + 2.0 * 13.0, 11.0 + 2.0 * 12.0]);
        let g = Tensor::full(y.shape(), 1.0);
        let gx = conv2d_backward_input(&g, &w, x.shape(), ConvParams::same(5, 1, 1)).unwrap();
        assert_eq!(gx.data(), &[12.0 + 11.0, 13.0 + 12.0]);
    }
}
