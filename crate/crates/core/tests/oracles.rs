//! Frozen hand-computed values and naive-loop oracles for the tensor core
//! and the quantizer.

mod common;

use bitshare_nas::quantizer::{decompose, quantize, Bits};
use bitshare_nas::supernet::{BackboneConfig, ModelSpec, SuperNet};
use bitshare_nas::supernet::Subnet;
use bitshare_nas::tensor::{ops, Tape, Tensor};
use common::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).expect("tensor")
}

#[test]
fn conv_by_hand() {
    // 1..9 in a 3x3 image, 3x3 kernel of ones, padding 1: neighbourhood sums.
    let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
    let k = t(&[1, 1, 3, 3], &[1.; 9]);
    let y = ops::conv2d(&x, &k, 1, 1, 1).expect("conv");
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert_eq!(y.data(), &[12., 21., 16., 27., 45., 33., 24., 39., 28.]);

    // Stride 2 keeps the corners.
    let y = ops::conv2d(&x, &k, 2, 1, 1).expect("conv");
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.data(), &[12., 16., 24., 28.]);

    // No padding: the single full window.
    assert_eq!(ops::conv2d(&x, &k, 1, 0, 1).expect("conv").data(), &[45.]);

    // Depthwise: each channel scaled by its own 1x1 weight.
    let x2 = t(&[1, 2, 1, 2], &[1., 2., 3., 4.]);
    let k2 = t(&[2, 1, 1, 1], &[10., -1.]);
    assert_eq!(ops::conv2d(&x2, &k2, 1, 0, 2).expect("dw").data(), &[10., 20., -3., -4.]);
}

#[test]
fn dense_and_pool_by_hand() {
    let x = t(&[2, 2], &[1., 2., 3., 4.]);
    let w = t(&[2, 3], &[1., 0., -1., 2., 1., 0.]);
    let b = t(&[3], &[0.5, 0., 0.]);
    assert_eq!(ops::dense(&x, &w, &b).expect("dense").data(), &[5.5, 2., -1., 11.5, 4., -3.]);
    let p = ops::global_avg_pool(&t(&[1, 2, 1, 2], &[1., 3., -2., 2.])).expect("pool");
    assert_eq!(p.data(), &[2., 0.]);
}

#[test]
fn conv_matches_oracle_on_odd_shapes() {
    let mut r = rng(1);
    for (xs, ks, stride, pad, groups) in [
        ([1, 1, 1, 1], [1, 1, 1, 1], 1, 0, 1),
        ([1, 2, 1, 7], [2, 1, 1, 3], 1, 1, 2),
        ([2, 3, 9, 4], [3, 1, 5, 5], 2, 2, 3),
        ([1, 6, 3, 3], [9, 2, 3, 3], 3, 1, 3),
    ] {
        let x = uniform::<f64>(&xs, &mut r, 1.0);
        let k = uniform::<f64>(&ks, &mut r, 1.0);
        let (want, shape) = naive_conv2d(x.data(), xs, k.data(), ks, stride, pad, groups);
        let got = ops::conv2d(&x, &k, stride, pad, groups).expect("conv");
        assert_eq!(got.shape(), shape);
        assert!(max_scaled_diff(got.data(), &want) < 1e-12);
    }
}

#[test]
fn cross_entropy_by_hand() {
    // Uniform logits: loss is ln(3) whatever the label.
    let mut tape = Tape::new();
    let z = tape.param(t(&[2, 3], &[0.; 6]));
    let l = tape.softmax_cross_entropy(z, &[0, 2]).expect("ce");
    assert!((tape.value(l).data()[0] - 3f64.ln()).abs() < 1e-15);
    let g = tape.backward(l).expect("backward");
    let third = 1.0 / 3.0;
    let want = [third - 1.0, third, third, third, third, third - 1.0].map(|v| v / 2.0);
    for (a, b) in g.get(z).expect("grad").data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn quantizer_by_hand() {
    // min 0, scale 1: 0.3 sits at 4.8/16 -> 5/16; 0.53125 = 8.5/16 -> 8/16.
    let w = t(&[4], &[0.0, 0.3, 0.53125, 1.0]);
    assert_eq!(quantize(&w, 4).expect("q").data(), &[0.0, 0.3125, 0.5, 1.0]);
    assert_eq!(quantize(&w, 2).expect("q").data(), &[0.0, 0.25, 0.5, 1.0]);
    // Shifted and scaled range maps back.
    let w = t(&[3], &[-2.0, -1.0, 2.0]);
    assert_eq!(quantize(&w, 2).expect("q").data(), &[-2.0, -1.0, 2.0]);
    // Constant tensors are returned untouched.
    let c = t(&[3], &[0.7; 3]);
    assert_eq!(quantize(&c, 4).expect("q").data(), &[0.7; 3]);
}

#[test]
fn residual_grids_telescope() {
    let mut r = rng(2);
    for _ in 0..50 {
        let w = uniform::<f32>(&[37], &mut r, 0.3);
        let d = decompose(&w).expect("decompose");
        for (b, n) in [(Bits::B4, 4), (Bits::B8, 8), (Bits::B16, 16)] {
            assert_eq!(d.at_bits(b), quantize(&w, n).expect("q"));
        }
    }
}

#[test]
fn subnet_archive_round_trip() {
    let net = SuperNet::<f32>::build(&BackboneConfig::tiny(3), &mut rng(3)).expect("net");
    let spec: ModelSpec = net.sample_spec(&mut rng(4));
    let sub = net.extract_subnet(&spec).expect("extract");
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("s.bsnas");
    sub.save(&path).expect("save");
    let back = Subnet::load(&path).expect("load");
    let x = uniform::<f32>(&[2, 3, 8, 8], &mut rng(5), 1.0);
    let logits = |s: &Subnet<f32>| {
        let mut tape = Tape::new();
        let (l, _) = s.forward(&mut tape, &x, true, false).expect("forward");
        tape.value(l).clone()
    };
    assert_eq!(logits(&sub), logits(&back));
    assert_eq!(back.spec, spec);
}
