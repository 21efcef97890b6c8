//! Forward kernels against brute-force loop implementations, plus the
//! algebraic properties of pooling, softmax and resizing.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sapnet::tensor::{
    avg_pool2d, batch_norm, conv2d, fully_connected, max_pool2d, resize_bilinear, softmax_flat,
    BatchNormStats, NormMode, Tensor,
};

const INSTANCES: u64 = 120;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, wd) = x.dims3().unwrap();
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.data()[co];
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += x.at3(ci, iy as usize, ix as usize)
                                    * w.data()[((co * cin + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(&[cout, oh, ow], out).unwrap()
}

fn window_oracle(x: &Tensor, k: usize, reduce: fn(&[f64]) -> f64) -> Tensor {
    let (c, h, w) = x.dims3().unwrap();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut win = Vec::with_capacity(k * k);
                for dy in 0..k {
                    for dx in 0..k {
                        win.push(x.at3(ch, y + dy, xx + dx));
                    }
                }
                out.push(reduce(&win));
            }
        }
    }
    Tensor::new(&[c, oh, ow], out).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Half-pixel bilinear sample, written per output pixel.
fn resize_oracle(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = x.dims3().unwrap();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let sy =
                    ((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
                let sx =
                    ((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let v = (1.0 - fy) * ((1.0 - fx) * x.at3(ch, y0, x0) + fx * x.at3(ch, y0, x1))
                    + fy * ((1.0 - fx) * x.at3(ch, y1, x0) + fx * x.at3(ch, y1, x1));
                out.push(v);
            }
        }
    }
    Tensor::new(&[c, oh, ow], out).unwrap()
}

#[test]
fn conv2d_trivial_cases() {
    let y = conv2d(
        &Tensor::new(&[1, 1, 1], vec![5.0]).unwrap(),
        &Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap(),
        &Tensor::from_vec(vec![1.0]),
        1,
        0,
    )
    .unwrap();
    assert_eq!(y.data(), &[11.0]);
    let y = conv2d(
        &Tensor::ones(&[1, 3, 3]),
        &Tensor::ones(&[1, 1, 3, 3]),
        &Tensor::zeros(&[1]),
        1,
        0,
    )
    .unwrap();
    assert_eq!((y.shape(), y.data()), (&[1usize, 1, 1][..], &[9.0][..]));
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    assert!(conv2d(
        &Tensor::ones(&[2, 4, 4]),
        &Tensor::ones(&[1, 3, 3, 3]),
        &Tensor::zeros(&[1]),
        1,
        0
    )
    .is_err());
}

#[test]
fn conv2d_matches_six_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[4, 8, 8]);
    let w = rand_tensor(&mut rng, &[6, 4, 3, 3]);
    let b = rand_tensor(&mut rng, &[6]);
    assert!(
        conv2d(&x, &w, &b, 1, 0)
            .unwrap()
            .max_abs_diff(&conv_oracle(&x, &w, &b, 1, 0))
            < 1e-10
    );
    for i in 0..INSTANCES {
        let cin = rng.gen_range(1..4);
        let cout = rng.gen_range(1..4);
        let k = rng.gen_range(1..4);
        let stride = rng.gen_range(1..3);
        let pad = rng.gen_range(0..2);
        let h = rng.gen_range(k.max(2)..8);
        let wd = rng.gen_range(k.max(2)..8);
        let x = rand_tensor(&mut rng, &[cin, h, wd]);
        let w = rand_tensor(&mut rng, &[cout, cin, k, k]);
        let b = rand_tensor(&mut rng, &[cout]);
        let got = conv2d(&x, &w, &b, stride, pad).unwrap();
        let want = conv_oracle(&x, &w, &b, stride, pad);
        assert_eq!(got.shape(), want.shape(), "instance {i}");
        assert!(got.max_abs_diff(&want) < 1e-10, "instance {i}");
    }
}

#[test]
fn pooling_trivial_cases() {
    let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(avg_pool2d(&x, 2).unwrap().data(), &[2.5]);
    assert_eq!(max_pool2d(&x, 2).unwrap().data(), &[4.0]);
    assert!(avg_pool2d(&x, 3).is_err());
    assert!(max_pool2d(&x, 3).is_err());
}

#[test]
fn pooling_matches_window_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[2, 8, 8]);
    assert!(
        avg_pool2d(&x, 3)
            .unwrap()
            .max_abs_diff(&window_oracle(&x, 3, mean))
            < 1e-12
    );
    assert_eq!(max_pool2d(&x, 3).unwrap(), window_oracle(&x, 3, max));
    for i in 0..INSTANCES {
        let c = rng.gen_range(1..4);
        let h = rng.gen_range(1..10);
        let w = rng.gen_range(1..10);
        let k = rng.gen_range(1..=h.min(w));
        let x = rand_tensor(&mut rng, &[c, h, w]);
        assert!(
            avg_pool2d(&x, k)
                .unwrap()
                .max_abs_diff(&window_oracle(&x, k, mean))
                < 1e-10,
            "instance {i}"
        );
        assert_eq!(
            max_pool2d(&x, k).unwrap(),
            window_oracle(&x, k, max),
            "instance {i}"
        );
    }
}

#[test]
fn softmax_cases() {
    assert_eq!(softmax_flat(&Tensor::zeros(&[4])).data(), &[0.25; 4]);
    let s = softmax_flat(&Tensor::from_vec(vec![1000.0, 0.0]));
    assert!(s.all_finite() && (s.data()[0] - 1.0).abs() < 1e-15 && s.data()[1] < 1e-300);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..INSTANCES {
        let x = rand_tensor(&mut rng, &[9]).scale(5.0);
        let z: f64 = x.data().iter().map(|v| v.exp()).sum();
        let want = x.map(|v| v.exp() / z);
        assert!(softmax_flat(&x).max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn resize_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[2, 5, 3]);
    assert_eq!(resize_bilinear(&x, 5, 3).unwrap(), x);
    let c = Tensor::full(&[1, 3, 4], 0.7);
    assert!(resize_bilinear(&c, 7, 2)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.7));
    let small = Tensor::new(&[1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
    let up = resize_bilinear(&small, 4, 4).unwrap();
    assert!(up.max_abs_diff(&resize_oracle(&small, 4, 4)) < 1e-12);
    assert_eq!(up.data()[0], 1.0);
    // (1,1) sits a quarter pixel from the top-left input
    assert!((up.data()[5] - 2.5).abs() < 1e-12);
    for _ in 0..INSTANCES {
        let (h, w) = (rng.gen_range(1..7), rng.gen_range(1..7));
        let (oh, ow) = (rng.gen_range(1..10), rng.gen_range(1..10));
        let x = rand_tensor(&mut rng, &[2, h, w]);
        assert!(
            resize_bilinear(&x, oh, ow)
                .unwrap()
                .max_abs_diff(&resize_oracle(&x, oh, ow))
                < 1e-12
        );
    }
}

#[test]
fn fully_connected_cases() {
    let x = Tensor::from_vec(vec![2.0, 3.0]);
    let y = fully_connected(
        &x,
        &Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap(),
        &Tensor::zeros(&[1]),
    )
    .unwrap();
    assert_eq!(y.data(), &[5.0]);
    let eye = Tensor::from_fn(&[2, 2], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
    assert_eq!(fully_connected(&x, &eye, &Tensor::zeros(&[2])).unwrap(), x);
    assert!(fully_connected(&x, &Tensor::ones(&[1, 3]), &Tensor::zeros(&[1])).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..INSTANCES {
        let x = rand_tensor(&mut rng, &[8]);
        let w = rand_tensor(&mut rng, &[4, 8]);
        let b = rand_tensor(&mut rng, &[4]);
        let want: Vec<f64> = (0..4)
            .map(|o| {
                b.data()[o]
                    + (0..8)
                        .map(|i| w.data()[o * 8 + i] * x.data()[i])
                        .sum::<f64>()
            })
            .collect();
        assert!(
            fully_connected(&x, &w, &b)
                .unwrap()
                .max_abs_diff(&Tensor::from_vec(want))
                < 1e-12
        );
    }
}

#[test]
fn batch_norm_cases() {
    let ones = Tensor::ones(&[3]);
    let zeros = Tensor::zeros(&[3]);
    let mut stats = BatchNormStats::new(3);
    let flat = Tensor::full(&[4, 3], 2.0);
    let y = batch_norm(&flat, &ones, &zeros, &mut stats, NormMode::Train).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));

    let pm = Tensor::new(&[2, 3], vec![-1.0, -1.0, -1.0, 1.0, 1.0, 1.0]).unwrap();
    let y = batch_norm(
        &pm,
        &ones,
        &zeros,
        &mut BatchNormStats::new(3),
        NormMode::Train,
    )
    .unwrap();
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!(y.data()[..3].iter().all(|&v| (v + expect).abs() < 1e-12));
    assert!(y.data()[3..].iter().all(|&v| (v - expect).abs() < 1e-12));

    assert!(batch_norm(
        &Tensor::ones(&[1, 3]),
        &ones,
        &zeros,
        &mut stats,
        NormMode::Train
    )
    .is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[8, 16]).scale(3.0).add_scalar(1.5);
    let y = batch_norm(
        &x,
        &Tensor::ones(&[16]),
        &Tensor::zeros(&[16]),
        &mut BatchNormStats::new(16),
        NormMode::Train,
    )
    .unwrap();
    for d in 0..16 {
        let col: Vec<f64> = (0..8).map(|b| y.data()[b * 16 + d]).collect();
        let m = col.iter().sum::<f64>() / 8.0;
        let v = col.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / 8.0;
        assert!(m.abs() < 1e-6, "mean {m}");
        assert!((v - 1.0).abs() < 1e-3, "var {v}");
    }
}

fn small_map() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>)> {
    (1usize..4, 1usize..9, 1usize..9).prop_flat_map(|(c, h, w)| {
        (
            Just(c),
            Just(h),
            Just(w),
            prop::collection::vec(-10.0f64..10.0, c * h * w),
        )
    })
}

proptest! {
    #[test]
    fn pool_shapes_and_identity((c, h, w, data) in small_map(), k_frac in 0.0f64..1.0) {
        let x = Tensor::new(&[c, h, w], data).unwrap();
        let k = 1 + (k_frac * (h.min(w) - 1) as f64) as usize;
        let a = avg_pool2d(&x, k).unwrap();
        let m = max_pool2d(&x, k).unwrap();
        prop_assert_eq!(a.shape(), &[c, h - k + 1, w - k + 1]);
        prop_assert_eq!(m.shape(), a.shape());
        prop_assert_eq!(&avg_pool2d(&x, 1).unwrap(), &x);
        prop_assert_eq!(&max_pool2d(&x, 1).unwrap(), &x);
    }

    #[test]
    fn avg_pool_is_homogeneous((c, h, w, data) in small_map(), alpha in -4.0f64..4.0) {
        let x = Tensor::new(&[c, h, w], data).unwrap();
        let k = h.min(w).div_ceil(2);
        let lhs = avg_pool2d(&x.scale(alpha), k).unwrap();
        let rhs = avg_pool2d(&x, k).unwrap().scale(alpha);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(v in prop::collection::vec(-30.0f64..30.0, 1..40), shift in -100.0f64..100.0) {
        let x = Tensor::from_vec(v);
        let s = softmax_flat(&x);
        prop_assert!((s.sum() - 1.0).abs() < 1e-9);
        prop_assert!(s.data().iter().all(|&p| p > 0.0));
        prop_assert!(softmax_flat(&x.add_scalar(shift)).max_abs_diff(&s) < 1e-9);
    }

    #[test]
    fn resize_keeps_constants(c in 1usize..3, h in 1usize..7, w in 1usize..7, oh in 1usize..12, ow in 1usize..12, v in -5.0f64..5.0) {
        let y = resize_bilinear(&Tensor::full(&[c, h, w], v), oh, ow).unwrap();
        prop_assert_eq!(y.shape(), &[c, oh, ow]);
        prop_assert!(y.data().iter().all(|&u| u == v));
    }

    #[test]
    fn conv_output_shape(cin in 1usize..3, cout in 1usize..3, k in 1usize..4, stride in 1usize..3, pad in 0usize..2, h in 3usize..8, w in 3usize..8) {
        let x = Tensor::ones(&[cin, h, w]);
        let y = conv2d(&x, &Tensor::ones(&[cout, cin, k, k]), &Tensor::zeros(&[cout]), stride, pad).unwrap();
        prop_assert_eq!(y.shape(), &[cout, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1]);
    }
}
