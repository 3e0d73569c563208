//! Extracting standalone subnets from the supernet and checking that they
//! compute exactly what the supernet computes under the same decisions.
//!
//! ```text
//! cargo run --release --example subnet_extract
//! ```

use bitshare_nas::supernet::{BackboneConfig, ForwardMode, SuperNet};
use bitshare_nas::tensor::{Tape, Tensor};
use bitshare_nas::SearchRng;
use rand::SeedableRng;

fn main() -> anyhow::Result<()> {
    let cfg = BackboneConfig {
        allow_skip: true,
        ..BackboneConfig::tiny(4)
    };
    let mut rng = SearchRng::seed_from_u64(9);
    let net = SuperNet::<f32>::build(&cfg, &mut rng)?;
    let batch = Tensor::<f32>::from_fn(&[6, 3, 8, 8], |i| ((i * 7919 % 113) as f32 / 56.0) - 1.0);
    println!("supernet: {} layers, {} bits at full size", net.num_layers(), net.model_size_bits(&net.determinize())?);

    let mut worst = 0.0f32;
    for trial in 0..5 {
        let spec = net.sample_spec(&mut rng);
        let mut tape = Tape::new();
        let f = net.forward(&mut tape, &batch, ForwardMode::Spec(&spec), None, false)?;
        let supernet_logits = tape.value(f.logits).clone();
        let sub = net.extract_subnet(&spec)?;
        let mut tape = Tape::new();
        let (logits, _) = sub.forward(&mut tape, &batch, true, false)?;
        let diff = tape.value(logits).max_abs_diff(&supernet_logits)?;
        worst = worst.max(diff);
        let layers: Vec<String> = spec
            .arch
            .iter()
            .zip(&spec.quant)
            .map(|(a, b)| if a.is_skip() { "skip".into() } else { format!("{}{}/{}", a.kernel, a.expand, b.count()) })
            .collect();
        println!(
            "spec {trial}: [{}] {} B, max |logit diff| {diff:.1e}",
            layers.join(" "),
            sub.size_bits() / 8
        );
    }
    println!("worst difference over all specs: {worst:.1e}");
    Ok(())
}
