use proptest::prelude::*;
use rfk_core::autodiff::{finite_diff_check, Graph};
use rfk_core::tensor::{
    channel_sum, concat_channels, conv2d, ew_mul_broadcast, global_sum_spatial, relative_error, relu,
    split_channels, ConvParams,
};
use rfk_core::{Rng, Shape, Tensor};

const TRIALS: u64 = 100;

fn t(dims: [usize; 4], data: &[f64]) -> Tensor<f64> {
    Tensor::from_slice(dims, data).unwrap()
}

fn random_shape(rng: &mut Rng) -> Shape {
    Shape::new(1 + rng.below(2), 1 + rng.below(4), 1 + rng.below(5), 1 + rng.below(5))
}

/// Direct seven-loop convolution with zero padding.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, p: ConvParams) -> Tensor<f64> {
    let xs = x.shape();
    let ws = w.shape();
    let (cout, cin_g, kh, kw) = (ws.batch, ws.channels, ws.height, ws.width);
    let cout_g = cout / p.groups;
    let ho = (xs.height + 2 * p.padding - kh) / p.stride + 1;
    let wo = (xs.width + 2 * p.padding - kw) / p.stride + 1;
    let out = Shape::new(xs.batch, cout, ho, wo);
    let mut data = vec![0.0; out.numel()];
    for b in 0..xs.batch {
        for co in 0..cout {
            let g = co / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin_g {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                if iy < 0 || ix < 0 || iy >= xs.height as isize || ix >= xs.width as isize {
                                    continue;
                                }
                                acc += x.get(b, g * cin_g + ci, iy as usize, ix as usize) * w.get(co, ci, ky, kx);
                            }
                        }
                    }
                    data[out.offset(b, co, oy, ox)] = acc;
                }
            }
        }
    }
    Tensor::new(out, data).unwrap()
}

#[test]
fn relu_examples() {
    assert_eq!(relu(&t([1, 1, 1, 3], &[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
    let zero = Tensor::<f64>::zeros(Shape::new(2, 3, 4, 5));
    assert_eq!(relu(&zero), zero);
}

#[test]
fn relu_is_projection() {
    let mut rng = Rng::new(1);
    for _ in 0..TRIALS {
        let s = random_shape(&mut rng);
        let x: Tensor<f64> = rng.tensor(s, -1.0, 1.0);
        let y = relu(&x);
        for (&o, &i) in y.data().iter().zip(x.data()) {
            assert_eq!(o * (o - i), 0.0);
            assert!(o >= 0.0);
        }
    }
}

#[test]
fn ew_mul_examples() {
    let a = t([1, 1, 1, 2], &[2.0, 3.0]);
    assert_eq!(ew_mul_broadcast(&a, &t([1, 1, 1, 1], &[5.0])).unwrap().data(), &[10.0, 15.0]);
    let b = t([1, 1, 1, 2], &[3.0, 4.0]);
    assert_eq!(ew_mul_broadcast(&t([1, 1, 1, 2], &[1.0, 2.0]), &b).unwrap().data(), &[3.0, 8.0]);
}

#[test]
fn ew_mul_channel_broadcast_matches_loop() {
    let mut rng = Rng::new(2);
    for _ in 0..TRIALS {
        let s = random_shape(&mut rng);
        let a: Tensor<f64> = rng.tensor(s, -1.0, 1.0);
        let b: Tensor<f64> = rng.tensor(Shape::new(s.batch, s.channels, 1, 1), -2.0, 2.0);
        let out = ew_mul_broadcast(&a, &b).unwrap();
        for bi in 0..s.batch {
            for c in 0..s.channels {
                for h in 0..s.height {
                    for w in 0..s.width {
                        assert_eq!(out.get(bi, c, h, w), a.get(bi, c, h, w) * b.get(bi, c, 0, 0));
                    }
                }
            }
        }
    }
}

#[test]
fn ew_mul_rejects_general_broadcast() {
    let a = Tensor::<f64>::zeros(Shape::new(1, 2, 3, 3));
    let row = Tensor::<f64>::zeros(Shape::new(1, 2, 1, 3));
    assert!(ew_mul_broadcast(&a, &row).is_err());
}

#[test]
fn global_sum_examples() {
    assert_eq!(global_sum_spatial(&t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).data(), &[10.0]);
    let z = global_sum_spatial(&Tensor::<f64>::zeros(Shape::new(1, 3, 2, 2)));
    assert_eq!(z.shape(), Shape::new(1, 3, 1, 1));
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn global_sum_matches_loop() {
    let mut rng = Rng::new(3);
    for _ in 0..TRIALS {
        let s = random_shape(&mut rng);
        let x: Tensor<f64> = rng.tensor(s, -1.0, 1.0);
        let out = global_sum_spatial(&x);
        for b in 0..s.batch {
            for c in 0..s.channels {
                let mut acc = 0.0;
                for h in 0..s.height {
                    for w in 0..s.width {
                        acc += x.get(b, c, h, w);
                    }
                }
                assert!((out.get(b, c, 0, 0) - acc).abs() <= 1e-12 * (1.0 + acc.abs()));
            }
        }
    }
}

#[test]
fn channel_sum_examples() {
    assert_eq!(channel_sum(&t([1, 2, 1, 1], &[3.0, 4.0])).data(), &[7.0]);
    let one = t([1, 1, 2, 2], &[1.0, -2.0, 3.0, 0.5]);
    assert_eq!(channel_sum(&one), one);
}

#[test]
fn channel_sum_matches_loop() {
    let mut rng = Rng::new(4);
    for _ in 0..TRIALS {
        let s = random_shape(&mut rng);
        let x: Tensor<f64> = rng.tensor(s, -1.0, 1.0);
        let out = channel_sum(&x);
        assert_eq!(out.shape(), Shape::new(s.batch, 1, s.height, s.width));
        for b in 0..s.batch {
            for h in 0..s.height {
                for w in 0..s.width {
                    let acc: f64 = (0..s.channels).map(|c| x.get(b, c, h, w)).sum();
                    assert!((out.get(b, 0, h, w) - acc).abs() <= 1e-12 * (1.0 + acc.abs()));
                }
            }
        }
    }
}

#[test]
fn conv_identity_kernel() {
    let mut rng = Rng::new(5);
    let x: Tensor<f64> = rng.tensor(Shape::new(2, 3, 4, 5), -1.0, 1.0);
    let w = Tensor::from_fn(Shape::new(3, 3, 1, 1), |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let bias = Tensor::zeros(Shape::new(1, 3, 1, 1));
    assert_eq!(conv2d(&x, &w, Some(&bias), ConvParams::pointwise()).unwrap(), x);
}

#[test]
fn depthwise_ones_counts_taps() {
    let v = 1.5;
    let x = Tensor::full(Shape::new(1, 2, 4, 4), v);
    let w = Tensor::full(Shape::new(2, 1, 3, 3), 1.0);
    let y = conv2d(&x, &w, None, ConvParams::same(3, 1, 2)).unwrap();
    for c in 0..2 {
        for h in 0..4 {
            for col in 0..4 {
                let edge_h = h == 0 || h == 3;
                let edge_w = col == 0 || col == 3;
                let taps = match (edge_h, edge_w) {
                    (true, true) => 4.0,
                    (false, false) => 9.0,
                    _ => 6.0,
                };
                assert_eq!(y.get(0, c, h, col), taps * v);
            }
        }
    }
}

#[test]
fn pointwise_two_to_three_matches_matvec() {
    let mut rng = Rng::new(6);
    let x: Tensor<f64> = rng.tensor(Shape::new(1, 2, 4, 4), -1.0, 1.0);
    let w: Tensor<f64> = rng.tensor(Shape::new(3, 2, 1, 1), -1.0, 1.0);
    let y = conv2d(&x, &w, None, ConvParams::pointwise()).unwrap();
    for h in 0..4 {
        for col in 0..4 {
            for co in 0..3 {
                let expect = w.get(co, 0, 0, 0) * x.get(0, 0, h, col) + w.get(co, 1, 0, 0) * x.get(0, 1, h, col);
                assert!((y.get(0, co, h, col) - expect).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn conv_matches_loop_oracle() {
    let mut rng = Rng::new(7);
    for trial in 0..TRIALS {
        let groups = [1, 2][rng.below(2)];
        let cin = groups * (1 + rng.below(3));
        let cout = groups * (1 + rng.below(3));
        let k = [1, 3, 5][rng.below(3)];
        let stride = 1 + rng.below(2);
        let padding = rng.below(k / 2 + 1);
        let h = k + rng.below(5);
        let w = k + rng.below(5);
        let batch = 1 + rng.below(2);
        let x: Tensor<f64> = rng.tensor(Shape::new(batch, cin, h, w), -1.0, 1.0);
        let wt: Tensor<f64> = rng.tensor(Shape::new(cout, cin / groups, k, k), -1.0, 1.0);
        let p = ConvParams::new(stride, padding, groups);
        let got = conv2d(&x, &wt, None, p).unwrap();
        let want = conv_oracle(&x, &wt, p);
        assert_eq!(got.shape(), want.shape(), "trial {trial}");
        assert!(relative_error(&got, &want) <= 1e-6, "trial {trial} {p:?}");
    }
}

#[test]
fn conv_f32_matches_f64_oracle() {
    let mut rng = Rng::new(8);
    let x: Tensor<f64> = rng.tensor(Shape::new(2, 8, 9, 7), -1.0, 1.0);
    let w: Tensor<f64> = rng.tensor(Shape::new(8, 1, 3, 3), -1.0, 1.0);
    let p = ConvParams::same(3, 2, 8);
    let got = conv2d(&x.cast::<f32>(), &w.cast::<f32>(), None, p).unwrap();
    assert!(relative_error(&got.cast::<f64>(), &conv_oracle(&x, &w, p)) <= 1e-6);
}

#[test]
fn concat_and_split_shapes() {
    let a = Tensor::<f64>::zeros(Shape::new(1, 2, 3, 4));
    let b = Tensor::<f64>::zeros(Shape::new(1, 3, 3, 4));
    assert_eq!(concat_channels(&[&a, &b]).unwrap().shape(), Shape::new(1, 5, 3, 4));
    let x = Tensor::<f64>::zeros(Shape::new(1, 6, 3, 4));
    let parts = split_channels(&x, &[2, 2, 2]).unwrap();
    assert_eq!(parts.len(), 3);
    assert!(parts.iter().all(|p| p.shape() == Shape::new(1, 2, 3, 4)));
    assert!(split_channels(&x, &[2, 2]).is_err());
}

proptest! {
    #[test]
    fn split_concat_round_trip(
        seed in any::<u64>(),
        batch in 1usize..3,
        sizes in prop::collection::vec(1usize..4, 1..5),
        h in 1usize..4,
        w in 1usize..4,
    ) {
        let mut rng = Rng::new(seed);
        let parts: Vec<Tensor<f64>> = sizes
            .iter()
            .map(|&c| rng.tensor(Shape::new(batch, c, h, w), -1.0, 1.0))
            .collect();
        let refs: Vec<&Tensor<f64>> = parts.iter().collect();
        let joined = concat_channels(&refs).unwrap();
        let back = split_channels(&joined, &sizes).unwrap();
        prop_assert_eq!(&back, &parts);
        let back_refs: Vec<&Tensor<f64>> = back.iter().collect();
        prop_assert_eq!(concat_channels(&back_refs).unwrap(), joined);
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t([1, 2, 1, 2], &[0.3, -1.0, 2.0, 4.0]));
    let s = g.sum_all(x);
    let grads = g.backward(s, Tensor::scalar(1.0)).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
}

#[test]
fn backward_of_relu_sum() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t([1, 1, 1, 2], &[-1.0, 2.0]));
    let r = g.relu(x);
    let s = g.sum_all(r);
    let grads = g.backward(s, Tensor::scalar(1.0)).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn finite_diff_quadratic() {
    let mut rng = Rng::new(9);
    let x: Tensor<f64> = rng.tensor(Shape::new(1, 3, 2, 2), -1.0, 1.0);
    let report = finite_diff_check(
        |g, x| {
            let sq = g.mul(x, x)?;
            let half = g.scale(sq, 0.5);
            Ok(g.sum_all(half))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-8, "{report:?}");
}

#[test]
fn finite_diff_conv() {
    let mut rng = Rng::new(10);
    let x: Tensor<f64> = rng.tensor(Shape::new(1, 2, 5, 5), -1.0, 1.0);
    let w: Tensor<f64> = rng.tensor(Shape::new(3, 2, 3, 3), -1.0, 1.0);
    let report = finite_diff_check(
        |g, x| {
            let wn = g.constant(w.clone());
            let y = g.conv2d(x, wn, None, ConvParams::same(3, 1, 1))?;
            Ok(g.sum_all(y))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn same_seed_same_tensor() {
    let s = Shape::new(2, 3, 4, 5);
    let a: Tensor<f32> = Rng::new(42).tensor(s, -1.0, 1.0);
    let b: Tensor<f32> = Rng::new(42).tensor(s, -1.0, 1.0);
    assert_eq!(a, b);
}
