//! Elementwise, reduction and channel-layout kernels.
//!
//! Reductions always accumulate in ascending index order inside a single
//! chunk, so results do not depend on the number of workers.

use super::{Scalar, Shape, Tensor};
use crate::counter;
use crate::error::{Error, Result};
use crate::par;

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    counter::add_flops(x.numel());
    map(x, |v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `grad` where `input > 0`; the subgradient at exactly zero is zero.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    zip_map(input, grad, |x, g| if x > T::zero() { g } else { T::zero() })
}

/// Multiplies `a` by `b`, where `b` either has `a`'s shape or is a per-channel
/// `(B, C, 1, 1)` vector broadcast over every spatial position.
pub fn ew_mul_broadcast<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        counter::add_flops(a.numel());
        return Ok(zip_map(a, b, |x, y| x * y));
    }
    if !is_spatial_broadcast(sa, sb) {
        return Err(Error::ShapeMismatch {
            op: "ew_mul_broadcast",
            lhs: sa,
            rhs: sb,
        });
    }
    counter::add_flops(a.numel());
    let n = sa.tokens();
    let mut out = vec![T::zero(); a.numel()];
    par::for_each_chunk(&mut out, n, |plane, dst| {
        let s = b.data()[plane];
        let src = &a.data()[plane * n..(plane + 1) * n];
        for (o, &x) in dst.iter_mut().zip(src) {
            *o = x * s;
        }
    });
    Ok(Tensor::from_parts(sa, out))
}

pub(crate) fn is_spatial_broadcast(full: Shape, vector: Shape) -> bool {
    vector.batch == full.batch
        && vector.channels == full.channels
        && vector.height == 1
        && vector.width == 1
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "add",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    counter::add_flops(a.numel());
    Ok(zip_map(a, b, |x, y| x + y))
}

pub fn scale<T: Scalar>(x: &Tensor<T>, factor: T) -> Tensor<T> {
    counter::add_flops(x.numel());
    map(x, |v| v * factor)
}

/// Sum over all spatial positions: `(B, C, H, W) -> (B, C, 1, 1)`.
pub fn global_sum_spatial<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    counter::add_flops(x.numel());
    let s = x.shape();
    let n = s.tokens();
    let mut out = vec![T::zero(); s.batch * s.channels];
    par::for_each_chunk(&mut out, 1, |plane, dst| {
        let mut acc = T::zero();
        for &v in &x.data()[plane * n..(plane + 1) * n] {
            acc += v;
        }
        dst[0] = acc;
    });
    Tensor::from_parts(Shape::new(s.batch, s.channels, 1, 1), out)
}

/// Broadcasts a `(B, C, 1, 1)` vector over `height × width`.
pub fn broadcast_spatial<T: Scalar>(v: &Tensor<T>, height: usize, width: usize) -> Tensor<T> {
    let s = v.shape();
    let n = height * width;
    let mut out = vec![T::zero(); s.batch * s.channels * n];
    par::for_each_chunk(&mut out, n, |plane, dst| dst.fill(v.data()[plane]));
    Tensor::from_parts(Shape::new(s.batch, s.channels, height, width), out)
}

/// Sum over channels: `(B, C, H, W) -> (B, 1, H, W)`.
pub fn channel_sum<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    counter::add_flops(x.numel());
    let s = x.shape();
    let n = s.tokens();
    let mut out = vec![T::zero(); s.batch * n];
    par::for_each_chunk(&mut out, n, |b, dst| {
        for c in 0..s.channels {
            for (o, &v) in dst.iter_mut().zip(x.plane(b, c)) {
                *o += v;
            }
        }
    });
    Tensor::from_parts(Shape::new(s.batch, 1, s.height, s.width), out)
}

/// Repeats a `(B, 1, H, W)` map over `channels`.
pub fn broadcast_channels<T: Scalar>(v: &Tensor<T>, channels: usize) -> Tensor<T> {
    let s = v.shape();
    let n = s.tokens();
    let mut out = vec![T::zero(); s.batch * channels * n];
    par::for_each_chunk(&mut out, n, |plane, dst| {
        dst.copy_from_slice(v.plane(plane / channels, 0))
    });
    Tensor::from_parts(s.with_channels(channels), out)
}

/// Divides every channel at a position by that position's scalar:
/// `out[b,c,h,w] = num[b,c,h,w] / (den[b,0,h,w] + eps)`.
pub fn div_by_position<T: Scalar>(num: &Tensor<T>, den: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    check_position_map("div_by_position", num.shape(), den.shape())?;
    let s = num.shape();
    let n = s.tokens();
    counter::add_flops(num.numel() + s.batch * n);
    let mut out = vec![T::zero(); num.numel()];
    par::for_each_chunk(&mut out, s.channels * n, |b, dst| {
        let d = den.plane(b, 0);
        for (c, row) in dst.chunks_mut(n).enumerate() {
            for ((o, &x), &q) in row.iter_mut().zip(num.plane(b, c)).zip(d) {
                *o = x / (q + eps);
            }
        }
    });
    Ok(Tensor::from_parts(s, out))
}

/// Adjoints of [`div_by_position`] with respect to numerator and denominator.
pub fn div_by_position_backward<T: Scalar>(
    num: &Tensor<T>,
    den: &Tensor<T>,
    eps: T,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let s = num.shape();
    let n = s.tokens();
    let mut g_num = vec![T::zero(); num.numel()];
    par::for_each_chunk(&mut g_num, s.channels * n, |b, dst| {
        let d = den.plane(b, 0);
        for (c, row) in dst.chunks_mut(n).enumerate() {
            for ((o, &g), &q) in row.iter_mut().zip(grad.plane(b, c)).zip(d) {
                *o = g / (q + eps);
            }
        }
    });
    let mut g_den = vec![T::zero(); s.batch * n];
    par::for_each_chunk(&mut g_den, n, |b, dst| {
        let d = den.plane(b, 0);
        for c in 0..s.channels {
            for (((o, &g), &x), &q) in dst
                .iter_mut()
                .zip(grad.plane(b, c))
                .zip(num.plane(b, c))
                .zip(d)
            {
                let r = q + eps;
                *o -= g * x / (r * r);
            }
        }
    });
    (
        Tensor::from_parts(s, g_num),
        Tensor::from_parts(den.shape(), g_den),
    )
}

fn check_position_map(op: &'static str, full: Shape, map: Shape) -> Result<()> {
    if map.batch != full.batch
        || map.channels != 1
        || map.height != full.height
        || map.width != full.width
    {
        return Err(Error::ShapeMismatch {
            op,
            lhs: full,
            rhs: map,
        });
    }
    Ok(())
}

/// Per-channel affine map `x * scale[c] + shift[c]` with `(1, C, 1, 1)`
/// parameters; the inference form of a normalization layer with frozen
/// statistics.
pub fn channel_affine<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = x.shape();
    let expect = Shape::new(1, s.channels, 1, 1);
    for p in [scale, shift] {
        if p.shape() != expect {
            return Err(Error::ShapeMismatch {
                op: "channel_affine",
                lhs: s,
                rhs: p.shape(),
            });
        }
    }
    counter::add_flops(2 * x.numel());
    let n = s.tokens();
    let mut out = vec![T::zero(); x.numel()];
    par::for_each_chunk(&mut out, n, |plane, dst| {
        let c = plane % s.channels;
        let (a, b) = (scale.data()[c], shift.data()[c]);
        for (o, &v) in dst.iter_mut().zip(&x.data()[plane * n..(plane + 1) * n]) {
            *o = v * a + b;
        }
    });
    Ok(Tensor::from_parts(s, out))
}

/// Reduces a full-shape gradient to `(1, C, 1, 1)`, optionally weighting by `x`.
pub fn channel_reduce<T: Scalar>(grad: &Tensor<T>, weight: Option<&Tensor<T>>) -> Tensor<T> {
    let s = grad.shape();
    let mut out = vec![T::zero(); s.channels];
    par::for_each_chunk(&mut out, 1, |c, dst| {
        let mut acc = T::zero();
        for b in 0..s.batch {
            match weight {
                Some(x) => {
                    for (&g, &v) in grad.plane(b, c).iter().zip(x.plane(b, c)) {
                        acc += g * v;
                    }
                }
                None => {
                    for &g in grad.plane(b, c) {
                        acc += g;
                    }
                }
            }
        }
        dst[0] = acc;
    });
    Tensor::from_parts(Shape::new(1, s.channels, 1, 1), out)
}

/// Sum of every element into a `(1, 1, 1, 1)` tensor.
pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    counter::add_flops(x.numel());
    let mut acc = T::zero();
    for &v in x.data() {
        acc += v;
    }
    Tensor::scalar(acc)
}

pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?
        .shape();
    for p in parts {
        let s = p.shape();
        if s.batch != first.batch || s.height != first.height || s.width != first.width {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: first,
                rhs: s,
            });
        }
    }
    let channels: usize = parts.iter().map(|p| p.shape().channels).sum();
    let out_shape = first.with_channels(channels);
    let mut data = Vec::with_capacity(out_shape.numel());
    for b in 0..first.batch {
        for p in parts {
            data.extend_from_slice(p.item_slice(b));
        }
    }
    Ok(Tensor::from_parts(out_shape, data))
}

/// Channels `start..start + len` of `x`.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if len == 0 || start + len > s.channels {
        return Err(Error::invalid(
            "slice_channels",
            format!("channels {start}..{} outside {s}", start + len),
        ));
    }
    let n = s.tokens();
    let mut data = Vec::with_capacity(s.batch * len * n);
    for b in 0..s.batch {
        let item = x.item_slice(b);
        data.extend_from_slice(&item[start * n..(start + len) * n]);
    }
    Ok(Tensor::from_parts(s.with_channels(len), data))
}

pub fn split_channels<T: Scalar>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let total: usize = sizes.iter().sum();
    if total != x.shape().channels {
        return Err(Error::invalid(
            "split_channels",
            format!("sizes {sizes:?} do not sum to {} channels", x.shape().channels),
        ));
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let part = slice_channels(x, start, len);
            start += len;
            part
        })
        .collect()
}

/// Places `part` at channel offset `start` of a zero tensor with `channels` channels.
pub fn pad_channels<T: Scalar>(part: &Tensor<T>, start: usize, channels: usize) -> Tensor<T> {
    let s = part.shape();
    let n = s.tokens();
    let out_shape = s.with_channels(channels);
    let mut data = vec![T::zero(); out_shape.numel()];
    for b in 0..s.batch {
        let dst = &mut data[b * channels * n..(b + 1) * channels * n];
        dst[start * n..(start + s.channels) * n].copy_from_slice(part.item_slice(b));
    }
    Tensor::from_parts(out_shape, data)
}

/// Token matrix product `M[b] = Σ_j K_j^T V_j`: for each batch item the
/// `d × d` matrix `M[c, e] = Σ_j k[c, j] · v[e, j]`, stored as `(B, 1, d, d)`.
pub fn kv_outer<T: Scalar>(k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    if k.shape() != v.shape() {
        return Err(Error::ShapeMismatch {
            op: "kv_outer",
            lhs: k.shape(),
            rhs: v.shape(),
        });
    }
    let s = k.shape();
    let d = s.channels;
    counter::add_macs(s.batch * d * d * s.tokens());
    let mut out = vec![T::zero(); s.batch * d * d];
    par::for_each_chunk(&mut out, d, |row, dst| {
        let (b, c) = (row / d, row % d);
        let kr = k.plane(b, c);
        for (e, o) in dst.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (&x, &y) in kr.iter().zip(v.plane(b, e)) {
                acc += x * y;
            }
            *o = acc;
        }
    });
    Ok(Tensor::from_parts(Shape::new(s.batch, 1, d, d), out))
}

/// Adjoints of [`kv_outer`] for `k` and `v`.
pub fn kv_outer_backward<T: Scalar>(
    k: &Tensor<T>,
    v: &Tensor<T>,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let s = k.shape();
    let (d, n) = (s.channels, s.tokens());
    let mut gk = vec![T::zero(); k.numel()];
    par::for_each_chunk(&mut gk, n, |row, dst| {
        let (b, c) = (row / d, row % d);
        let gm = grad.plane(b, 0);
        for e in 0..d {
            let w = gm[c * d + e];
            for (o, &y) in dst.iter_mut().zip(v.plane(b, e)) {
                *o += w * y;
            }
        }
    });
    let mut gv = vec![T::zero(); v.numel()];
    par::for_each_chunk(&mut gv, n, |row, dst| {
        let (b, e) = (row / d, row % d);
        let gm = grad.plane(b, 0);
        for c in 0..d {
            let w = gm[c * d + e];
            for (o, &x) in dst.iter_mut().zip(k.plane(b, c)) {
                *o += w * x;
            }
        }
    });
    (Tensor::from_parts(s, gk), Tensor::from_parts(s, gv))
}

/// Applies a `(B, 1, d, d)` matrix to every token: `out[b, e, j] = Σ_c q[b, c, j] · m[b, c, e]`.
pub fn query_matmul<T: Scalar>(q: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
    let s = q.shape();
    let d = s.channels;
    if m.shape() != Shape::new(s.batch, 1, d, d) {
        return Err(Error::ShapeMismatch {
            op: "query_matmul",
            lhs: s,
            rhs: m.shape(),
        });
    }
    counter::add_macs(s.batch * d * d * s.tokens());
    let n = s.tokens();
    let mut out = vec![T::zero(); q.numel()];
    par::for_each_chunk(&mut out, n, |row, dst| {
        let (b, e) = (row / d, row % d);
        let mm = m.plane(b, 0);
        for c in 0..d {
            let w = mm[c * d + e];
            for (o, &x) in dst.iter_mut().zip(q.plane(b, c)) {
                *o += w * x;
            }
        }
    });
    Ok(Tensor::from_parts(s, out))
}

/// Adjoints of [`query_matmul`] for `q` and `m`.
pub fn query_matmul_backward<T: Scalar>(
    q: &Tensor<T>,
    m: &Tensor<T>,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let s = q.shape();
    let (d, n) = (s.channels, s.tokens());
    let mut gq = vec![T::zero(); q.numel()];
    par::for_each_chunk(&mut gq, n, |row, dst| {
        let (b, c) = (row / d, row % d);
        let mm = m.plane(b, 0);
        for e in 0..d {
            let w = mm[c * d + e];
            for (o, &g) in dst.iter_mut().zip(grad.plane(b, e)) {
                *o += w * g;
            }
        }
    });
    let mut gm = vec![T::zero(); s.batch * d * d];
    par::for_each_chunk(&mut gm, d, |row, dst| {
        let (b, c) = (row / d, row % d);
        let qr = q.plane(b, c);
        for (e, o) in dst.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (&x, &g) in qr.iter().zip(grad.plane(b, e)) {
                acc += x * g;
            }
            *o = acc;
        }
    });
    (
        Tensor::from_parts(s, gq),
        Tensor::from_parts(m.shape(), gm),
    )
}

/// Mean softmax cross-entropy of `(B, K, 1, 1)` logits against class labels.
/// Returns the scalar loss and the softmax probabilities.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = logits.shape();
    if s.height != 1 || s.width != 1 || labels.len() != s.batch {
        return Err(Error::invalid(
            "softmax_cross_entropy",
            format!("expected (B, K, 1, 1) logits for {} labels, got {s}", labels.len()),
        ));
    }
    let k = s.channels;
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(
            "softmax_cross_entropy",
            format!("label {bad} outside {k} classes"),
        ));
    }
    counter::add_flops(4 * logits.numel() + s.batch);
    let mut probs = vec![T::zero(); logits.numel()];
    let mut loss = T::zero();
    for (b, &label) in labels.iter().enumerate() {
        let row = logits.item_slice(b);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut z = T::zero();
        for (p, &v) in probs[b * k..(b + 1) * k].iter_mut().zip(row) {
            *p = (v - max).exp();
            z += *p;
        }
        for p in &mut probs[b * k..(b + 1) * k] {
            *p /= z;
        }
        loss += z.ln() + max - row[label];
    }
    let batch = T::from_f64(s.batch as f64);
    Ok((Tensor::scalar(loss / batch), Tensor::from_parts(s, probs)))
}

fn map<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T + Sync + Send) -> Tensor<T> {
    let mut out = vec![T::zero(); x.numel()];
    let chunk = elementwise_chunk(x.shape());
    par::for_each_chunk(&mut out, chunk, |i, dst| {
        let src = &x.data()[i * chunk..i * chunk + dst.len()];
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = f(v);
        }
    });
    Tensor::from_parts(x.shape(), out)
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T + Sync + Send) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let mut out = vec![T::zero(); a.numel()];
    let chunk = elementwise_chunk(a.shape());
    par::for_each_chunk(&mut out, chunk, |i, dst| {
        let lo = i * chunk;
        let hi = lo + dst.len();
        for ((o, &x), &y) in dst.iter_mut().zip(&a.data()[lo..hi]).zip(&b.data()[lo..hi]) {
            *o = f(x, y);
        }
    });
    Tensor::from_parts(a.shape(), out)
}

fn elementwise_chunk(s: Shape) -> usize {
    s.tokens().max(4096)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: [usize; 4], data: &[f32]) -> Tensor<f32> {
        Tensor::from_slice(dims, data).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = t([1, 1, 1, 3], &[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let z = Tensor::<f32>::zeros(Shape::new(1, 2, 3, 3));
        assert_eq!(relu(&z), z);
    }

    #[test]
    fn mul_scalar_broadcast() {
        let a = t([1, 1, 1, 2], &[2.0, 3.0]);
        let b = t([1, 1, 1, 1], &[5.0]);
        assert_eq!(ew_mul_broadcast(&a, &b).unwrap().data(), &[10.0, 15.0]);
    }

    #[test]
    fn mul_equal_shapes() {
        let a = t([1, 1, 1, 2], &[1.0, 2.0]);
        let b = t([1, 1, 1, 2], &[3.0, 4.0]);
        assert_eq!(ew_mul_broadcast(&a, &b).unwrap().data(), &[3.0, 8.0]);
    }

    #[test]
    fn mul_rejects_general_broadcast() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 2, 2, 2));
        for bad in [
            Shape::new(1, 1, 1, 1),
            Shape::new(1, 2, 2, 1),
            Shape::new(2, 2, 1, 1),
            Shape::new(1, 1, 2, 2),
        ] {
            let b = Tensor::<f32>::zeros(bad);
            assert!(matches!(
                ew_mul_broadcast(&a, &b),
                Err(Error::ShapeMismatch { .. })
            ));
        }
    }

    #[test]
    fn global_sum_small() {
        let x = t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let s = global_sum_spatial(&x);
        assert_eq!(s.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(s.item(), 10.0);
        let z = global_sum_spatial(&Tensor::<f32>::zeros(Shape::new(2, 3, 2, 2)));
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_sum_small() {
        let x = t([1, 2, 1, 1], &[3.0, 4.0]);
        assert_eq!(channel_sum(&x).data(), &[7.0]);
        let one = t([1, 1, 1, 3], &[1.0, -2.0, 5.0]);
        assert_eq!(channel_sum(&one), one);
    }

    #[test]
    fn concat_and_split_shapes() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 2, 3, 3));
        let b = Tensor::<f32>::zeros(Shape::new(1, 3, 3, 3));
        assert_eq!(
            concat_channels(&[&a, &b]).unwrap().shape(),
            Shape::new(1, 5, 3, 3)
        );
        let x = Tensor::<f32>::zeros(Shape::new(1, 6, 2, 2));
        let parts = split_channels(&x, &[2, 2, 2]).unwrap();
        assert_eq!(parts.len(), 3);
        assert!(parts.iter().all(|p| p.shape() == Shape::new(1, 2, 2, 2)));
    }

    #[test]
    fn concat_split_errors() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 2, 3, 3));
        let b = Tensor::<f32>::zeros(Shape::new(1, 2, 2, 3));
        assert!(concat_channels(&[&a, &b]).is_err());
        assert!(concat_channels::<f32>(&[]).is_err());
        assert!(split_channels(&a, &[1, 2]).is_err());
    }

    #[test]
    fn div_by_position_rejects_bad_map() {
        let num = Tensor::<f32>::zeros(Shape::new(1, 2, 2, 2));
        let den = Tensor::<f32>::zeros(Shape::new(1, 2, 2, 2));
        assert!(div_by_position(&num, &den, 1e-6).is_err());
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        let logits = Tensor::<f64>::zeros(Shape::new(2, 4, 1, 1));
        let (loss, probs) = softmax_cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((loss.item() - 4f64.ln()).abs() < 1e-12);
        assert!(probs.data().iter().all(|&p| (p - 0.25).abs() < 1e-12));
        assert!(softmax_cross_entropy(&logits, &[0, 4]).is_err());
    }
}
