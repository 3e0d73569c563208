//! The latency/accuracy reward and the Pareto front of a set of models.
//!
//! ```text
//! cargo run --example pareto_front
//! ```

use bitshare_nas::objective::{non_dominated_flags, pareto_front, reward, EvaluatedModel, RewardConfig};
use bitshare_nas::quantizer::Bits;
use bitshare_nas::superkernel::ArchDecision;
use bitshare_nas::supernet::ModelSpec;
use rand::{Rng, SeedableRng};

fn main() -> anyhow::Result<()> {
    for (mu, nu) in [(0.2, 0.8), (0.5, 0.5), (0.8, 0.2)] {
        let cfg = RewardConfig {
            mu,
            nu,
            lat_threshold: 2.0,
            acc_threshold: 0.9,
            ..RewardConfig::default()
        };
        cfg.validate()?;
        let row: Vec<String> = [1.0, 1.5, 2.0, 2.5, 3.0]
            .iter()
            .map(|&lat| format!("{:+.3}", reward(0.92, lat, &cfg)))
            .collect();
        println!("mu={mu} nu={nu}: reward at 92% for 1.0..3.0 ms: {}", row.join(" "));
    }

    let cfg = RewardConfig::default();
    let mut rng = bitshare_nas::SearchRng::seed_from_u64(11);
    let spec = ModelSpec::uniform(1, ArchDecision::MAX, Bits::B8);
    let models: Vec<EvaluatedModel> = (0..12)
        .map(|_| {
            let lat: f64 = rng.gen_range(0.5..2.0);
            // Faster models tend to be less accurate.
            let acc = (0.6 + 0.2 * lat + rng.gen_range(-0.08..0.08)).min(1.0);
            EvaluatedModel::new(spec.clone(), acc, lat, &cfg)
        })
        .collect();
    let flags = non_dominated_flags(&models);
    println!("{:>8} {:>8} {:>8}  front", "lat", "acc", "reward");
    for (m, f) in models.iter().zip(&flags) {
        println!("{:>8.3} {:>8.3} {:>+8.3}  {}", m.latency_ms, m.accuracy, m.reward, if *f { "*" } else { "" });
    }
    let front = pareto_front(&models);
    println!(
        "front by latency: {}",
        front
            .iter()
            .map(|m| format!("({:.2} ms, {:.3})", m.latency_ms, m.accuracy))
            .collect::<Vec<_>>()
            .join(" ")
    );
    Ok(())
}
