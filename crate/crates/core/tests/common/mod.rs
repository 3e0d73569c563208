//! Shared helpers for the integration tests: naive-loop oracles and small
//! search fixtures.

#![allow(dead_code)]

use bitshare_nas::data::{synthetic, SyntheticConfig};
use bitshare_nas::objective::{estimate_latency, synth_latency_table, BitFactors, RewardConfig};
use bitshare_nas::quantizer::Bits;
use bitshare_nas::search::{Objective, SearchConfig, SearchData};
use bitshare_nas::superkernel::ArchDecision;
use bitshare_nas::supernet::{BackboneConfig, ModelSpec};
use bitshare_nas::tensor::Tensor;
use bitshare_nas::SearchRng;
use rand::{Rng, SeedableRng};

pub fn rng(seed: u64) -> SearchRng {
    SearchRng::seed_from_u64(seed)
}

pub fn uniform<T: bitshare_nas::tensor::Scalar>(shape: &[usize], rng: &mut SearchRng, scale: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-scale..scale)))
}

/// Direct 7-deep loop convolution with zero padding and channel groups.
pub fn naive_conv2d(
    x: &[f64],
    xs: [usize; 4],
    k: &[f64],
    ks: [usize; 4],
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, w] = xs;
    let [o, ipg, kh, kw] = ks;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let opg = o / groups;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            let g = oc / opg;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..ipg {
                        let cin = g * ipg + ic;
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * c + cin) * h + iy as usize) * w + ix as usize];
                                let kv = k[((oc * ipg + ic) * kh + i) * kw + j];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    (out, [n, o, oh, ow])
}

pub fn naive_dense(x: &[f64], n: usize, d: usize, w: &[f64], k: usize, bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for r in 0..n {
        for c in 0..k {
            let mut acc = bias[c];
            for i in 0..d {
                acc += x[r * d + i] * w[i * k + c];
            }
            out[r * k + c] = acc;
        }
    }
    out
}

pub fn naive_avg_pool(x: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    (0..n * c)
        .map(|i| x[i * plane..(i + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect()
}

pub fn to_f64<T: bitshare_nas::tensor::Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64_lossy()).collect()
}

/// Largest `|a - b| / max(1, |b|)`.
pub fn max_scaled_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}

/// Four-class synthetic task with a 5000/1000 train/validation split.
pub fn toy_data(classes: usize, per_class: usize, noise: f64, seed: u64, val_fraction: f64) -> SearchData {
    let all = synthetic(&SyntheticConfig {
        num_classes: classes,
        samples: classes * per_class,
        noise,
        seed,
        ..SyntheticConfig::default()
    })
    .expect("synthetic data");
    let (train, val) = all.split(1.0 - val_fraction, seed + 1).expect("split");
    SearchData { train, val }
}

/// Synthetic latency table for `backbone`, with the latency threshold at
/// the uniform 3x3 / expand-6 / 8-bit network.
pub fn toy_objective(backbone: &BackboneConfig, mu: f64, acc_threshold: f64) -> Objective {
    let latency = synth_latency_table(backbone, 10.0, &BitFactors::default(), 0.1).expect("table");
    let mid = ModelSpec::uniform(backbone.num_layers(), ArchDecision { kernel: 3, expand: 6 }, Bits::B8);
    Objective {
        reward: RewardConfig {
            mu,
            nu: 1.0 - mu,
            lat_threshold: estimate_latency(&mid, &latency).expect("latency"),
            acc_threshold,
            ..RewardConfig::default()
        },
        latency,
    }
}

pub fn toy_search_config(epochs: usize, seed: u64) -> SearchConfig {
    SearchConfig {
        max_epochs: epochs,
        warmup_epochs: epochs / 3,
        batch_size: 64,
        threshold_lr: 5.0,
        eval_batches: 4,
        retrain_epochs: Some(2),
        rng_seed: seed,
        ..SearchConfig::default()
    }
}
