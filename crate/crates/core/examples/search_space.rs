//! Size of the joint architecture and precision space.
//!
//! Each layer picks a 3x3 or 5x5 kernel and expansion 3 or 6 (4 choices)
//! and a bit width in {4, 8, 16} (3 choices), so `L` layers give `12^L`
//! configurations. Layers that may also be skipped add a fifth architecture.
//!
//! ```text
//! cargo run --example search_space
//! ```

use bitshare_nas::supernet::{count_for_layers, count_space, BackboneConfig};

fn main() -> anyhow::Result<()> {
    let cifar = BackboneConfig::default();
    let c = count_space(&cifar)?;
    println!(
        "default backbone: {} layers, {} architectures x {} precisions = {} (~{:.3e})",
        cifar.num_layers(),
        c.n_arch,
        c.n_quant,
        c.total,
        c.total.to_string().parse::<f64>()?
    );

    let deep = count_for_layers(22, 0);
    println!("22 layers: {} (~{:.3e})", deep.total, deep.total.to_string().parse::<f64>()?);

    let skippy = BackboneConfig {
        allow_skip: true,
        ..BackboneConfig::default()
    };
    let s = count_space(&skippy)?;
    let skippable = skippy.layers()?.iter().filter(|l| l.skip_allowed).count();
    println!("with skip on {skippable} residual layers: {} (~{:.3e})", s.total, s.total.to_string().parse::<f64>()?);
    Ok(())
}
