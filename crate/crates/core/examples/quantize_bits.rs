//! Bit-sharing on one small weight tensor.
//!
//! A single normalization and a 16-bit grid hold all three precisions; the
//! 8- and 4-bit weights are what remains after dropping one or both
//! residuals.
//!
//! ```text
//! cargo run --example quantize_bits
//! ```

use bitshare_nas::gate::GateMode;
use bitshare_nas::quantizer::{bit_share, decompose, drop_probabilities, q_round, quantize, Bits, QuantThresholds};
use bitshare_nas::tensor::Tensor;

fn main() -> anyhow::Result<()> {
    let w = Tensor::<f32>::from_fn(&[4, 6], |i| ((i as f32) * 1.37).sin() * 0.3);
    let d = decompose(&w)?;
    println!("offset {:.4}, scale {:.4}", d.params.offset, d.params.scale);

    for bits in Bits::ALL {
        let shared = d.at_bits(bits);
        let direct = quantize(&w, bits.count())?;
        let bound = d.params.scale / (1u32 << bits.count()) as f32;
        println!(
            "{:>2} bits: max error {:.2e} (bound {:.2e}), identical to direct quantization: {}",
            bits.count(),
            shared.max_abs_diff(&w)?,
            bound,
            shared == direct
        );
    }

    let (n16, n8) = (d.norm_sq_9_16(), d.norm_sq_5_8());
    println!("residual norms: ||r_9_16||^2 = {n16:.3e}, ||r_5_8||^2 = {n8:.3e}");

    // Thresholds above a residual's norm drop those bits.
    let cases = [
        ("keep everything", QuantThresholds { t_q_9_16: 0.5 * n16, t_q_5_8: 0.5 * n8 }),
        ("drop 9..16", QuantThresholds { t_q_9_16: 2.0 * n16, t_q_5_8: 0.5 * n8 }),
        ("drop 5..16", QuantThresholds { t_q_9_16: 2.0 * n16, t_q_5_8: 2.0 * n8 }),
    ];
    for (label, t) in cases {
        let hard = bit_share(&d, &t, GateMode::Hard);
        let soft = bit_share(&d, &t, GateMode::Soft);
        let (p16, p8) = drop_probabilities(&d, &t);
        println!(
            "{label:>16}: {:>2} bits; soft multipliers ({:.4}, {:.4}); drop probabilities ({p16:.4}, {p8:.4}); soft weights differ from hard by {:.2e}",
            hard.bits().map_or(0, |b| b.count()),
            soft.outer,
            soft.inner,
            soft.weights.max_abs_diff(&hard.weights)?
        );
    }

    // A fractional part of exactly one half rounds down.
    let x = 2.5f64 / 16.0;
    println!("q_round({x}, 4) = {} (2/16), q_round({}, 4) = {} (3/16)", q_round(x, 4)?, x + 1e-9, q_round(x + 1e-9, 4)?);
    Ok(())
}
