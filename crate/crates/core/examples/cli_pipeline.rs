//! The command-line workflow driven in-process: ingest a synthetic dataset,
//! generate a latency table, search, evolve onto more classes, and emit a
//! report. Each step is the same code path the `bitshare-nas` binary runs.
//!
//! ```text
//! cargo run --release --example cli_pipeline
//! ```

use bitshare_nas::cli::{run, Cli};
use clap::Parser;

fn step(args: &[&str]) -> anyhow::Result<()> {
    println!("$ bitshare-nas {}", args.join(" "));
    let cli = Cli::try_parse_from(std::iter::once("bitshare-nas").chain(args.iter().copied()))?;
    println!("  {}", run(&cli)?);
    Ok(())
}

fn config(classes: usize, dataset: &str, table: &str, out: &str) -> serde_json::Value {
    serde_json::json!({
        "backbone": {
            "num_blocks": 5, "groups_per_block": 4, "in_channels": 3, "stem_channels": 4,
            "block_channels": [4, 8, 8, 12, 16], "block_strides": [1, 2, 1, 2, 1],
            "num_classes": classes, "input_resolution": 8
        },
        "search": { "max_epochs": 2, "warmup_epochs": 1, "batch_size": 64, "threshold_lr": 5.0, "retrain_epochs": 1 },
        "reward": { "mu": 0.5, "nu": 0.5, "lat_threshold": 1.6, "acc_threshold": 0.9 },
        "dataset": {
            "kind": "synthetic", "path": dataset,
            "classes": (0..classes).collect::<Vec<_>>(),
            "resolution": 8, "split": "half", "split_seed": 1
        },
        "latency": { "kind": "table", "path": table },
        "output_dir": out
    })
}

fn main() -> anyhow::Result<()> {
    let dir = std::env::temp_dir().join(format!("bitshare-nas-demo-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();

    step(&["ingest", "--kind", "synthetic", "--classes", "6", "--samples", "900", "--out", &p("data.bsnas")])?;
    step(&["latency", "make-synthetic", "--preset", "tiny", "--coeff", "10", "--overhead", "0.1", "--out", &p("table.csv")])?;
    step(&["latency", "validate", "--preset", "tiny", "--table", &p("table.csv")])?;

    std::fs::write(p("stage1.json"), config(3, &p("data.bsnas"), &p("table.csv"), &p("stage1")).to_string())?;
    step(&["search", "--config", &p("stage1.json")])?;

    std::fs::write(p("stage2.json"), config(6, &p("data.bsnas"), &p("table.csv"), &p("stage2")).to_string())?;
    step(&["evolve", "--config", &p("stage2.json"), "--checkpoint", &p("stage1/checkpoint.bsnas"), "--target-accuracy", "0.5"])?;
    step(&["report", "--result", &p("stage2/result.json"), "--out", &p("report")])?;

    for f in ["curves.csv", "pareto.csv"] {
        println!("--- {f}");
        print!("{}", std::fs::read_to_string(dir.join("report").join(f))?);
    }
    // Refuses to overwrite without --force.
    if let Err(e) = step(&["search", "--config", &p("stage1.json")]) {
        println!("  rerun without --force: {e}");
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
