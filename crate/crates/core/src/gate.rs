//! Sigmoid-relaxed binary decisions shared by the architecture and
//! quantization searches.

use rand::{Rng, RngCore};

/// How a relaxed decision is turned into a multiplier.
pub enum GateMode<'a> {
    /// Use the sigmoid value itself.
    Soft,
    /// Draw a Bernoulli outcome with the sigmoid value as probability.
    Sampled(&'a mut dyn RngCore),
    /// Step function: 1 iff the sigmoid argument is `>= 0`.
    Hard,
}

impl std::fmt::Debug for GateMode<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GateMode::Soft => "Soft",
            GateMode::Sampled(_) => "Sampled",
            GateMode::Hard => "Hard",
        })
    }
}

impl GateMode<'_> {
    /// Resolves a decision whose sigmoid argument is `arg`.
    pub fn resolve(&mut self, arg: f64) -> f64 {
        match self {
            GateMode::Soft => sigmoid(arg),
            GateMode::Sampled(rng) => {
                if bernoulli(&mut **rng, sigmoid(arg)) {
                    1.0
                } else {
                    0.0
                }
            }
            GateMode::Hard => hard(arg),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Degenerated sigmoid; ties at exactly 0 resolve to 1.
pub fn hard(arg: f64) -> f64 {
    if arg >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// One uniform draw compared against `p`.
pub fn bernoulli<R: RngCore + ?Sized>(rng: &mut R, p: f64) -> bool {
    rng.gen::<f64>() < p
}

/// Group-Lasso indicator in architecture orientation: `||w||^2 - t`.
pub fn indicator(subset_norm_sq: f64, threshold: f64) -> f64 {
    subset_norm_sq - threshold
}

/// Indicator in quantization orientation, where the order is inverted:
/// `t - ||r||^2`.
pub fn inverted_indicator(threshold: f64, residual_norm_sq: f64) -> f64 {
    threshold - residual_norm_sq
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_reference_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(0.5) - 0.622_459_331_201_854_6).abs() < 1e-15);
        assert!(sigmoid(800.0) == 1.0 && sigmoid(-800.0) == 0.0);
        assert!((sigmoid(-3.0) + sigmoid(3.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn indicator_orientations() {
        assert_eq!(indicator(2.0, 1.5), 0.5);
        assert_eq!(inverted_indicator(2.0, 1.5), 0.5);
        assert_eq!(indicator(1.5, 1.5), 0.0);
        assert_eq!(sigmoid(indicator(1.0, f64::INFINITY)), 0.0);
    }

    #[test]
    fn hard_tie_is_inclusive() {
        assert_eq!(hard(0.0), 1.0);
        assert_eq!(hard(-1e-300), 0.0);
    }
}
