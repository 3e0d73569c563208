//! Latency lookup tables: generate an analytic one, write it as CSV, read it
//! back, and see what validation reports for a broken table.
//!
//! ```text
//! cargo run --example latency_table
//! ```

use bitshare_nas::objective::{estimate_latency, synth_latency_table, BitFactors, LatencyTable};
use bitshare_nas::quantizer::Bits;
use bitshare_nas::superkernel::ArchDecision;
use bitshare_nas::supernet::{BackboneConfig, ModelSpec};

fn main() -> anyhow::Result<()> {
    let backbone = BackboneConfig::tiny(4);
    let layers = backbone.num_layers();
    let table = synth_latency_table(&backbone, 10.0, &BitFactors::default(), 0.1)?;

    let mut csv = Vec::new();
    table.to_csv(&mut csv)?;
    let text = String::from_utf8(csv)?;
    println!("{} rows, first few:", text.lines().count() - 1);
    for line in text.lines().take(5) {
        println!("  {line}");
    }
    let back = LatencyTable::from_csv(text.as_bytes(), layers)?;
    assert_eq!(back, table);

    for (name, arch, bits) in [
        ("smallest", ArchDecision { kernel: 3, expand: 3 }, Bits::B4),
        ("largest", ArchDecision::MAX, Bits::B16),
    ] {
        let spec = ModelSpec::uniform(layers, arch, bits);
        println!("{name:>8} uniform spec: {:.3} ms", estimate_latency(&spec, &table)?);
    }

    // Drop one row and the overhead row: both problems are reported.
    let broken: String = text
        .lines()
        .filter(|l| !l.starts_with("3,5,6,8,") && !l.starts_with("overhead"))
        .map(|l| format!("{l}\n"))
        .collect();
    match LatencyTable::from_csv(broken.as_bytes(), layers) {
        Ok(_) => println!("unexpectedly valid"),
        Err(e) => println!("broken table: {e}"),
    }
    let no_row: String = text.lines().filter(|l| !l.starts_with("3,5,6,8,")).map(|l| format!("{l}\n")).collect();
    if let Err(e) = LatencyTable::from_csv(no_row.as_bytes(), layers) {
        println!("missing row: {e}");
    }
    Ok(())
}
