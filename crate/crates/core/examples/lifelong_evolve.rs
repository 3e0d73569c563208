//! Lifelong warm start: search on five classes, then evolve the checkpoint
//! onto ten classes and compare with a from-scratch search on ten.
//!
//! ```text
//! cargo run --release --example lifelong_evolve [epochs]
//! ```

use bitshare_nas::data::{synthetic, SyntheticConfig};
use bitshare_nas::objective::{estimate_latency, synth_latency_table, BitFactors, RewardConfig};
use bitshare_nas::quantizer::Bits;
use bitshare_nas::search::{evolve, run_search, Objective, SearchConfig, SearchData};
use bitshare_nas::superkernel::ArchDecision;
use bitshare_nas::supernet::{BackboneConfig, ModelSpec};

fn main() -> anyhow::Result<()> {
    let epochs: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(8);
    let data = |classes: usize| -> anyhow::Result<SearchData> {
        let all = synthetic(&SyntheticConfig {
            num_classes: classes,
            samples: 300 * classes,
            noise: 1.5,
            ..SyntheticConfig::default()
        })?;
        let (train, val) = all.split(0.8, 1)?;
        Ok(SearchData { train, val })
    };
    let objective = |backbone: &BackboneConfig| -> anyhow::Result<Objective> {
        let latency = synth_latency_table(backbone, 10.0, &BitFactors::default(), 0.1)?;
        let mid = ModelSpec::uniform(backbone.num_layers(), ArchDecision { kernel: 3, expand: 6 }, Bits::B8);
        Ok(Objective {
            reward: RewardConfig {
                lat_threshold: estimate_latency(&mid, &latency)?,
                acc_threshold: 0.9,
                ..RewardConfig::default()
            },
            latency,
        })
    };
    let cfg = SearchConfig {
        max_epochs: epochs,
        warmup_epochs: 1,
        batch_size: 64,
        threshold_lr: 5.0,
        retrain_epochs: Some(2),
        rng_seed: 4,
        ..SearchConfig::default()
    };

    let five = BackboneConfig::tiny(5);
    let stage1 = run_search(&five, &data(5)?, &objective(&five)?, &cfg, None)?;
    println!("stage 1 (5 classes): final accuracy {:.3}", stage1.result.final_accuracy);

    let ten = BackboneConfig::tiny(10);
    let (d10, o10) = (data(10)?, objective(&ten)?);
    let scratch = run_search(&ten, &d10, &o10, &cfg, None)?;
    let target = scratch.result.history.last().map_or(0.0, |h| h.val_accuracy) - 0.01;
    let evolved = evolve(
        &stage1.checkpoint,
        &ten,
        &d10,
        &o10,
        &SearchConfig {
            target_accuracy: Some(target),
            ..cfg.clone()
        },
    )?;
    let curve = |h: &[bitshare_nas::search::EpochRecord]| {
        h.iter().map(|r| format!("{:.3}", r.val_accuracy)).collect::<Vec<_>>().join(" ")
    };
    println!("from scratch: {}", curve(&scratch.result.history));
    println!("evolved:      {}", curve(&evolved.result.history));
    let report = evolved.result.evolve.as_ref().expect("evolve report");
    println!(
        "target {:.3} (scratch final minus one point) reached after {:?} of {epochs} epochs",
        target, report.epochs_to_target
    );
    println!("depthwise weight drift per layer (mean |change| / rms):");
    for d in &report.drift {
        let mark = if d.layer == report.middle_layer { " <- middle" } else { "" };
        println!("  layer {:>2}: {:.4}{mark}", d.layer, d.ratio);
    }
    Ok(())
}
