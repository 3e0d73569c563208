//! Randomized properties of the quantizer, the reward and the Pareto front.

use bitshare_nas::objective::{non_dominated_flags, reward, EvaluatedModel, RewardConfig};
use bitshare_nas::quantizer::{decompose, q_round, quantize, Bits};
use bitshare_nas::superkernel::ArchDecision;
use bitshare_nas::supernet::ModelSpec;
use bitshare_nas::tensor::Tensor;
use proptest::prelude::*;

proptest! {
    #[test]
    fn quantize_is_idempotent(v in prop::collection::vec(-100.0f64..100.0, 2..40), b in 1u32..=16) {
        let w = Tensor::new(vec![v.len()], v).unwrap();
        let q = quantize(&w, b).unwrap();
        let qq = quantize(&q, b).unwrap();
        for (a, c) in q.data().iter().zip(qq.data()) {
            prop_assert!((a - c).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn quantize_keeps_the_range_and_order(v in prop::collection::vec(-5.0f64..5.0, 2..40), b in 1u32..=16) {
        let w = Tensor::new(vec![v.len()], v.clone()).unwrap();
        let q = quantize(&w, b).unwrap();
        let (lo, hi) = v.iter().fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
        for (i, &x) in v.iter().enumerate() {
            let y = q.data()[i];
            prop_assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
            for (j, &z) in v.iter().enumerate() {
                if x < z {
                    prop_assert!(y <= q.data()[j]);
                }
            }
        }
    }

    #[test]
    fn q_round_lands_on_the_grid(x in 0.0f64..=1.0, b in 1u32..=16) {
        let levels = (1u64 << b) as f64;
        let q = q_round(x, b).unwrap();
        prop_assert!((q * levels).fract() == 0.0);
        prop_assert!((q - x).abs() <= 0.5 / levels);
    }

    #[test]
    fn grids_match_direct_quantization(v in prop::collection::vec(-1.0f32..1.0, 1..30)) {
        let w = Tensor::new(vec![v.len()], v).unwrap();
        let d = decompose(&w).unwrap();
        prop_assert_eq!(d.at_bits(Bits::B4), quantize(&w, 4).unwrap());
        prop_assert_eq!(d.at_bits(Bits::B8), quantize(&w, 8).unwrap());
        prop_assert_eq!(d.at_bits(Bits::B16), quantize(&w, 16).unwrap());
    }

    #[test]
    fn reward_prefers_faster_and_more_accurate(
        mu in 0.05f64..0.95,
        acc in 0.0f64..1.0,
        lat in 0.1f64..10.0,
        da in 1e-3f64..0.5,
        dl in 1e-3f64..5.0,
    ) {
        let cfg = RewardConfig { mu, nu: 1.0 - mu, lat_threshold: 2.0, acc_threshold: 0.8, ..RewardConfig::default() };
        prop_assert!(reward(acc, lat + dl, &cfg) < reward(acc, lat, &cfg));
        prop_assert!(reward((acc + da).min(1.0 + da), lat, &cfg) > reward(acc, lat, &cfg));
    }

    #[test]
    fn front_members_are_never_dominated(points in prop::collection::vec((0u8..20, 1u8..20), 1..60)) {
        let cfg = RewardConfig::default();
        let spec = ModelSpec::uniform(1, ArchDecision::MAX, Bits::B8);
        let models: Vec<EvaluatedModel> = points
            .iter()
            .map(|&(a, l)| EvaluatedModel::new(spec.clone(), a as f64 / 20.0, l as f64, &cfg))
            .collect();
        let flags = non_dominated_flags(&models);
        prop_assert!(flags.iter().any(|&f| f));
        for (i, m) in models.iter().enumerate() {
            let dominated = models.iter().any(|o| {
                o.accuracy >= m.accuracy && o.latency_ms <= m.latency_ms
                    && (o.accuracy > m.accuracy || o.latency_ms < m.latency_ms)
            });
            prop_assert_eq!(flags[i], !dominated);
        }
    }
}
