//! End-to-end search on a small synthetic task, once with a latency-leaning
//! reward and once with an accuracy-leaning one.
//!
//! ```text
//! cargo run --release --example toy_search [epochs] [noise]
//! ```

use std::time::Instant;

use bitshare_nas::data::{synthetic, SyntheticConfig};
use bitshare_nas::objective::{synth_latency_table, BitFactors, RewardConfig};
use bitshare_nas::search::{run_search, Objective, SearchConfig, SearchData};
use bitshare_nas::superkernel::ArchDecision;
use bitshare_nas::quantizer::Bits;
use bitshare_nas::supernet::{BackboneConfig, ModelSpec};
use bitshare_nas::objective::estimate_latency;

fn main() -> anyhow::Result<()> {
    let epochs: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(30);
    let noise: f64 = std::env::args().nth(2).map(|s| s.parse()).transpose()?.unwrap_or(1.0);
    let backbone = BackboneConfig::tiny(4);
    let all = synthetic(&SyntheticConfig {
        num_classes: 4,
        samples: 6000,
        noise,
        ..SyntheticConfig::default()
    })?;
    let (train, val) = all.split(5.0 / 6.0, 1)?;
    let data = SearchData { train, val };

    let table = synth_latency_table(&backbone, 10.0, &BitFactors::default(), 0.1)?;
    let mid = ModelSpec::uniform(backbone.num_layers(), ArchDecision { kernel: 3, expand: 6 }, Bits::B8);
    let lat_threshold = estimate_latency(&mid, &table)?;
    println!("latency threshold (3x3, e6, 8 bit everywhere): {lat_threshold:.3} ms");

    let cfg = SearchConfig {
        max_epochs: epochs,
        warmup_epochs: epochs / 3,
        batch_size: 64,
        threshold_lr: 5.0,
        retrain_epochs: Some(10),
        rng_seed: 3,
        ..SearchConfig::default()
    };
    for mu in [0.2, 0.8] {
        let objective = Objective {
            reward: RewardConfig {
                mu,
                nu: 1.0 - mu,
                lat_threshold,
                acc_threshold: 0.9,
                ..RewardConfig::default()
            },
            latency: table.clone(),
        };
        let start = Instant::now();
        let out = run_search(&backbone, &data, &objective, &cfg, None)?;
        let r = &out.result;
        let last = r.history.last();
        println!(
            "mu={mu}: {:.1}s, expected latency {:.3} ms, supernet val acc {:.3}, retrained acc {:.3}, final latency {:.3} ms, size {:.0} B",
            start.elapsed().as_secs_f64(),
            last.map_or(f64::NAN, |h| h.expected_latency),
            last.map_or(f64::NAN, |h| h.val_accuracy),
            r.final_accuracy,
            r.final_latency_ms,
            r.model_size_bytes
        );
        for h in &r.history {
            println!(
                "  epoch {:>2} loss {:.3} acc {:.3} E[lat] {:.3} reward {:+.3}",
                h.epoch, h.train_loss, h.val_accuracy, h.expected_latency, h.reward
            );
        }
        let spec: Vec<String> = r
            .spec
            .arch
            .iter()
            .zip(&r.spec.quant)
            .map(|(a, b)| format!("{}x{}/e{}/{}b", a.kernel, a.kernel, a.expand, b))
            .collect();
        println!("  spec: {}", spec.join(" "));
    }
    Ok(())
}
