mod common;

use common::{check_layer, full_model_gradcheck, rng, LAYERS};
use panolab::ops::{conv2d, pixel_unshuffle, temporal_conv, PadMode};
use panolab::parallel::sequential;
use panolab::tensor::{Shape, Tensor};
use proptest::prelude::*;

#[test]
fn every_layer_matches_finite_differences() {
    for (i, kind) in LAYERS.iter().enumerate() {
        let (max, samples) = check_layer(kind, 100 + i as u64);
        assert!(max < 1e-2, "{kind}: max relative error {max}\n{samples:#?}");
    }
}

#[test]
fn full_model_matches_finite_differences() {
    let (max, samples) = full_model_gradcheck(3, 10);
    assert!(max < 1e-2, "max relative error {max}\n{samples:#?}");
}

#[test]
fn parallel_and_sequential_kernels_agree_bitwise() {
    let mut r = rng(1);
    let x = Tensor::randn(Shape::new(2, 5, 4, 12, 24), &mut r);
    let k = Tensor::randn(Shape::new(7, 5, 1, 3, 3), &mut r);
    let kt = Tensor::randn(Shape::new(3, 5, 3, 1, 1), &mut r);
    let run = || {
        (
            conv2d(&x, &k, None, 1, PadMode::CircularHorizontal).unwrap(),
            conv2d(&x, &k, None, 2, PadMode::Zeros).unwrap(),
            temporal_conv(&x, &kt, None).unwrap(),
        )
    };
    assert_eq!(run(), sequential(run));
}

#[test]
fn full_model_gradients_identical_on_one_thread() {
    let a = full_model_gradcheck(5, 3);
    let b = sequential(|| full_model_gradcheck(5, 3));
    let ad: Vec<f64> = a.1.iter().map(|s| s.autodiff).collect();
    let bd: Vec<f64> = b.1.iter().map(|s| s.autodiff).collect();
    assert_eq!(ad, bd);
}

fn shape_and_kernel() -> impl Strategy<Value = (Shape, usize, usize, u64)> {
    (1usize..3, 1usize..4, 1usize..3, 1usize..7, 1usize..13, prop_oneof![Just(1usize), Just(3), Just(5)], 1usize..4, any::<u64>())
        .prop_map(|(b, c, f, h, w, k, co, seed)| (Shape::new(b, c, f, h, w), k, co, seed))
}

/// Direct-loop reference convolution in f64.
fn naive_conv(x: &Tensor, k: &Tensor, bias: &Tensor, stride: usize, pad: PadMode) -> Vec<f64> {
    let (s, ks) = (x.shape(), k.shape());
    let (kk, p) = (ks.height, ks.height as isize / 2);
    let (oh, ow) = (s.height.div_ceil(stride), s.width.div_ceil(stride));
    let mut out = Vec::new();
    for b in 0..s.batch {
        for co in 0..ks.batch {
            for f in 0..s.frames {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.data()[co] as f64;
                        for ci in 0..s.channels {
                            for ky in 0..kk {
                                for kx in 0..kk {
                                    let y = (oy * stride + ky) as isize - p;
                                    let mut xx = (ox * stride + kx) as isize - p;
                                    if y < 0 || y >= s.height as isize {
                                        continue;
                                    }
                                    if pad == PadMode::CircularHorizontal {
                                        xx = xx.rem_euclid(s.width as isize);
                                    } else if xx < 0 || xx >= s.width as isize {
                                        continue;
                                    }
                                    let v = x.get([b, ci, f, y as usize, xx as usize]) as f64;
                                    acc += v * k.get([co, ci, 0, ky, kx]) as f64;
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn conv_matches_direct_loops(
        (s, k, co, seed) in shape_and_kernel(),
        stride in 1usize..3,
        circular in any::<bool>(),
    ) {
        let mut r = rng(seed);
        let x = Tensor::randn(s, &mut r);
        let kern = Tensor::randn(Shape::new(co, s.channels, 1, k, k), &mut r);
        let bias = Tensor::randn(Shape::new(co, 1, 1, 1, 1), &mut r);
        let pad = if circular { PadMode::CircularHorizontal } else { PadMode::Zeros };
        let got = conv2d(&x, &kern, Some(&bias), stride, pad).unwrap();
        let expect = naive_conv(&x, &kern, &bias, stride, pad);
        prop_assert_eq!(got.numel(), expect.len());
        for (a, b) in got.data().iter().zip(&expect) {
            prop_assert!((*a as f64 - b).abs() < 1e-4 * b.abs().max(1.0), "{} vs {}", a, b);
        }
    }

    #[test]
    fn circular_conv_commutes_with_column_shift((s, k, co, seed) in shape_and_kernel(), shift in -20isize..20) {
        let mut r = rng(seed);
        let x = Tensor::randn(s, &mut r);
        let kern = Tensor::randn(Shape::new(co, s.channels, 1, k, k), &mut r);
        let bias = Tensor::randn(Shape::new(co, 1, 1, 1, 1), &mut r);
        let a = conv2d(&x.roll_columns(shift), &kern, Some(&bias), 1, PadMode::CircularHorizontal).unwrap();
        let b = conv2d(&x, &kern, Some(&bias), 1, PadMode::CircularHorizontal).unwrap().roll_columns(shift);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn unshuffle_preserves_values(h in 1usize..5, w in 1usize..5, r in 1usize..4, seed in any::<u64>()) {
        let x = Tensor::randn(Shape::new(1, 2, 2, h * r, w * r), &mut rng(seed));
        let y = pixel_unshuffle(&x, r).unwrap();
        let mut a: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
        prop_assert_eq!(y.shape(), Shape::new(1, 2 * r * r, 2, h, w));
    }

    #[test]
    fn roll_columns_is_a_group_action(w in 1usize..10, a in -30isize..30, b in -30isize..30, seed in any::<u64>()) {
        let x = Tensor::randn(Shape::new(1, 1, 1, 2, w), &mut rng(seed));
        prop_assert_eq!(x.roll_columns(a).roll_columns(b), x.roll_columns(a + b));
        prop_assert_eq!(x.roll_columns(w as isize), x.clone());
    }
}
