//! Weight quantization and bit-sharing.
//!
//! Weights are mapped into `[0,1]` by a min/max linear scaling, rounded onto a
//! `2^-b` grid, and mapped back. Bit-sharing expresses the 8- and 4-bit
//! versions of a tensor as the 16-bit version minus two residuals, so a single
//! weight tensor carries all three precisions and dropping residuals lands
//! exactly on the coarser grids.
//!
//! Residuals are kept on the normalized grid, where every value is a dyadic
//! rational with at most 16 fractional bits. Differences and sums of such values
//! are exact in both `f32` and `f64`, which makes the recomposition identities
//! hold bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::{self, GateMode};
use crate::tensor::{Scalar, Tensor};

const DEGENERATE_SCALE: f64 = 1e-12;

/// Bit widths available to the search.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Bits {
    B4,
    B8,
    B16,
}

impl Bits {
    pub const ALL: [Bits; 3] = [Bits::B4, Bits::B8, Bits::B16];

    pub fn count(self) -> u32 {
        match self {
            Bits::B4 => 4,
            Bits::B8 => 8,
            Bits::B16 => 16,
        }
    }

    /// Precision left after the two "leave out" decisions.
    pub fn from_drops(drop_9_16: bool, drop_5_8: bool) -> Bits {
        match (drop_9_16, drop_5_8) {
            (false, _) => Bits::B16,
            (true, false) => Bits::B8,
            (true, true) => Bits::B4,
        }
    }
}

impl TryFrom<u32> for Bits {
    type Error = String;

    fn try_from(v: u32) -> std::result::Result<Self, String> {
        match v {
            4 => Ok(Bits::B4),
            8 => Ok(Bits::B8),
            16 => Ok(Bits::B16),
            other => Err(format!("bit width {other} not in {{4, 8, 16}}")),
        }
    }
}

impl From<Bits> for u32 {
    fn from(b: Bits) -> u32 {
        b.count()
    }
}

impl std::fmt::Display for Bits {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.count())
    }
}

/// Linear scaling into `[0,1]`: `Norm(w) = (w - offset) / scale`.
///
/// A degenerate fit (constant source) turns quantization into the identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormParams<T> {
    pub offset: T,
    pub scale: T,
    pub degenerate: bool,
}

impl<T: Scalar> NormParams<T> {
    pub fn normalize(&self, w: T) -> T {
        if self.degenerate {
            w
        } else {
            (w - self.offset) / self.scale
        }
    }

    pub fn denormalize(&self, y: T) -> T {
        if self.degenerate {
            y
        } else {
            self.offset + y * self.scale
        }
    }
}

pub fn norm_fit<T: Scalar>(w: &[T]) -> Result<NormParams<T>> {
    if w.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot fit normalization on an empty tensor".into(),
        ));
    }
    let (lo, hi) = w
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    Ok(fit_from_range(lo, hi))
}

/// Fits on the elements whose `support` flag is set; an empty support is
/// degenerate.
pub fn norm_fit_where<T: Scalar>(w: &[T], support: &[bool]) -> NormParams<T> {
    let (lo, hi) = w
        .iter()
        .zip(support)
        .filter(|(_, &s)| s)
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), (&x, _)| (lo.min(x), hi.max(x)));
    if lo > hi {
        return NormParams {
            offset: T::zero(),
            scale: T::zero(),
            degenerate: true,
        };
    }
    fit_from_range(lo, hi)
}

fn fit_from_range<T: Scalar>(lo: T, hi: T) -> NormParams<T> {
    let scale = hi - lo;
    NormParams {
        offset: lo,
        scale,
        degenerate: !(scale.to_f64_lossy() >= DEGENERATE_SCALE),
    }
}

/// Rounds a normalized value onto the `2^-b` grid: `floor(x 2^b)/2^b + z/2^b`
/// with `z = 1` iff the fractional part of `x 2^b` is strictly greater than
/// 0.5. A fraction of exactly 0.5 therefore rounds down.
pub fn q_round<T: Scalar>(x: T, bits: u32) -> Result<T> {
    check_bits(bits)?;
    if !(x >= T::zero() && x <= T::one()) {
        return Err(Error::InvalidArgument(format!(
            "q_round input {:?} outside [0, 1]",
            x
        )));
    }
    Ok(round_grid(x, bits))
}

fn check_bits(bits: u32) -> Result<()> {
    if (1..=24).contains(&bits) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "bit count {bits} outside the supported range 1..=24"
        )))
    }
}

fn round_grid<T: Scalar>(x: T, bits: u32) -> T {
    let x = x.max(T::zero()).min(T::one());
    let levels = T::lit((1u64 << bits) as f64);
    let scaled = x * levels;
    let fl = scaled.floor();
    let zeta = if scaled - fl > T::lit(0.5) {
        T::one()
    } else {
        T::zero()
    };
    fl / levels + zeta / levels
}

/// `Norm^-1(Q(Norm(w), b))` with the normalization fitted on `w`.
pub fn quantize<T: Scalar>(w: &Tensor<T>, bits: u32) -> Result<Tensor<T>> {
    check_bits(bits)?;
    let params = norm_fit(w.data())?;
    Ok(quantize_with(w, &params, bits))
}

/// Quantizes with fixed normalization parameters. Values falling outside the
/// fitted range are clamped to it.
pub fn quantize_with<T: Scalar>(w: &Tensor<T>, params: &NormParams<T>, bits: u32) -> Tensor<T> {
    if params.degenerate {
        return w.clone();
    }
    w.map(|x| params.denormalize(round_grid(params.normalize(x), bits)))
}

/// A tensor expressed at 16 bits plus the residuals that separate it from its
/// 8- and 4-bit versions, all sharing one normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BitDecomposition<T> {
    pub params: NormParams<T>,
    shape: Vec<usize>,
    grid16: Vec<T>,
    grid8: Vec<T>,
    grid4: Vec<T>,
}

pub fn decompose<T: Scalar>(w: &Tensor<T>) -> Result<BitDecomposition<T>> {
    let params = norm_fit(w.data())?;
    Ok(decompose_with(w, &params))
}

pub fn decompose_with<T: Scalar>(w: &Tensor<T>, params: &NormParams<T>) -> BitDecomposition<T> {
    let (grid16, grid8, grid4) = if params.degenerate {
        let raw = w.data().to_vec();
        (raw.clone(), raw.clone(), raw)
    } else {
        let norm: Vec<T> = w.data().iter().map(|&x| params.normalize(x)).collect();
        let at = |b| norm.iter().map(|&x| round_grid(x, b)).collect::<Vec<T>>();
        (at(16), at(8), at(4))
    };
    BitDecomposition {
        params: *params,
        shape: w.shape().to_vec(),
        grid16,
        grid8,
        grid4,
    }
}

impl<T: Scalar> BitDecomposition<T> {
    fn denorm(&self, grid: impl Iterator<Item = T>) -> Tensor<T> {
        let data = grid.map(|y| self.params.denormalize(y)).collect();
        Tensor::new(self.shape.clone(), data).expect("decomposition shape")
    }

    fn residual(&self, hi: &[T], lo: &[T]) -> Tensor<T> {
        let scale = if self.params.degenerate {
            T::one()
        } else {
            self.params.scale
        };
        let data = hi.iter().zip(lo).map(|(&a, &b)| (a - b) * scale).collect();
        Tensor::new(self.shape.clone(), data).expect("decomposition shape")
    }

    /// Weights quantized to 16 bits.
    pub fn w16(&self) -> Tensor<T> {
        self.denorm(self.grid16.iter().copied())
    }

    /// Residual between the 16- and 8-bit versions, in weight units.
    pub fn r_9_16(&self) -> Tensor<T> {
        self.residual(&self.grid16, &self.grid8)
    }

    /// Residual between the 8- and 4-bit versions, in weight units.
    pub fn r_5_8(&self) -> Tensor<T> {
        self.residual(&self.grid8, &self.grid4)
    }

    pub fn norm_sq_9_16(&self) -> f64 {
        self.r_9_16().norm_sq()
    }

    pub fn norm_sq_5_8(&self) -> f64 {
        self.r_5_8().norm_sq()
    }

    /// `w16 - outer * (r_9_16 + inner * r_5_8)`, evaluated on the normalized
    /// grid and mapped back once.
    pub fn recompose(&self, outer: T, inner: T) -> Tensor<T> {
        self.denorm(
            self.grid16
                .iter()
                .zip(&self.grid8)
                .zip(&self.grid4)
                .map(|((&g16, &g8), &g4)| g16 - outer * ((g16 - g8) + inner * (g8 - g4))),
        )
    }

    /// The recomposition for a fixed precision.
    pub fn at_bits(&self, bits: Bits) -> Tensor<T> {
        let (o, i) = match bits {
            Bits::B16 => (T::zero(), T::zero()),
            Bits::B8 => (T::one(), T::zero()),
            Bits::B4 => (T::one(), T::one()),
        };
        self.recompose(o, i)
    }
}

/// Thresholds of the two "leave out" decisions of one group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantThresholds {
    pub t_q_9_16: f64,
    pub t_q_5_8: f64,
}

/// Result of [`bit_share`]: the composed weights and the two multipliers
/// (sigmoid values in soft mode, 0/1 otherwise).
#[derive(Clone, Debug, PartialEq)]
pub struct BitShare<T> {
    pub weights: Tensor<T>,
    pub outer: f64,
    pub inner: f64,
}

impl<T> BitShare<T> {
    /// Precision implied by 0/1 multipliers.
    pub fn bits(&self) -> Option<Bits> {
        let flag = |v: f64| {
            if v == 1.0 {
                Some(true)
            } else if v == 0.0 {
                Some(false)
            } else {
                None
            }
        };
        Some(Bits::from_drops(flag(self.outer)?, flag(self.inner)?))
    }
}

/// Probability of dropping bits 9..16 and bits 5..8 (inverted indicators).
pub fn drop_probabilities<T: Scalar>(d: &BitDecomposition<T>, t: &QuantThresholds) -> (f64, f64) {
    (
        gate::sigmoid(gate::inverted_indicator(t.t_q_9_16, d.norm_sq_9_16())),
        gate::sigmoid(gate::inverted_indicator(t.t_q_5_8, d.norm_sq_5_8())),
    )
}

/// `w_q = w16 - s_outer (r_9_16 + s_inner r_5_8)` with
/// `s = sigma(t - ||r||^2)` resolved according to `mode`.
pub fn bit_share<T: Scalar>(
    d: &BitDecomposition<T>,
    t: &QuantThresholds,
    mut mode: GateMode<'_>,
) -> BitShare<T> {
    let outer = mode.resolve(gate::inverted_indicator(t.t_q_9_16, d.norm_sq_9_16()));
    let inner = mode.resolve(gate::inverted_indicator(t.t_q_5_8, d.norm_sq_5_8()));
    BitShare {
        weights: d.recompose(T::lit(outer), T::lit(inner)),
        outer,
        inner,
    }
}

/// Precision selected by the hard (0-1) decisions.
pub fn effective_bits<T: Scalar>(d: &BitDecomposition<T>, t: &QuantThresholds) -> Bits {
    bit_share(d, t, GateMode::Hard)
        .bits()
        .expect("hard gates are 0/1")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn t(v: &[f32]) -> Tensor<f32> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn norm_fit_endpoints_and_errors() {
        let p = norm_fit(&[-1.0f32, 0.0, 1.0]).unwrap();
        assert_eq!((p.offset, p.scale, p.degenerate), (-1.0, 2.0, false));
        assert!(norm_fit::<f32>(&[]).is_err());
        let c = norm_fit(&[0.3f32; 5]).unwrap();
        assert!(c.degenerate);
        assert_eq!(quantize(&t(&[0.3; 5]), 4).unwrap(), t(&[0.3; 5]));
    }

    #[test]
    fn q_round_printed_rule() {
        assert_eq!(q_round(0.5f64, 4).unwrap(), 0.5);
        assert_eq!(q_round(1.0f64, 8).unwrap(), 1.0);
        assert_eq!(q_round(0.3f64, 2).unwrap(), 0.25);
        assert_eq!(q_round(0.4f64, 2).unwrap(), 0.5);
        // 0.375 * 4 = 1.5: fraction exactly one half rounds down.
        assert_eq!(q_round(0.375f64, 2).unwrap(), 0.25);
        assert!(q_round(1.2f64, 4).is_err());
        assert!(q_round(-0.1f64, 4).is_err());
    }

    #[test]
    fn quantize_one_bit_hand_case() {
        assert_eq!(quantize(&t(&[-1.0, 0.0, 1.0]), 1).unwrap(), t(&[-1.0, 0.0, 1.0]));
    }

    #[test]
    fn on_grid_is_unchanged() {
        let w = t(&[0.0, 0.0625, 0.5, 0.8125, 1.0]);
        assert_eq!(quantize(&w, 4).unwrap(), w);
    }

    #[test]
    fn decomposition_on_four_bit_grid_has_zero_residuals() {
        let w = t(&[-1.0, -0.875, 0.0, 0.25, 1.0]);
        let d = decompose(&w).unwrap();
        assert!(d.r_9_16().data().iter().all(|&x| x == 0.0));
        assert!(d.r_5_8().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hard_cases_map_to_bit_widths() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::<f32>::from_fn(&[64], |_| rng.gen_range(-1.0..1.0));
        let d = decompose(&w).unwrap();
        let (n916, n58) = (d.norm_sq_9_16(), d.norm_sq_5_8());
        let keep = QuantThresholds { t_q_9_16: n916 - 1.0, t_q_5_8: n58 - 1.0 };
        let mid = QuantThresholds { t_q_9_16: n916 + 1.0, t_q_5_8: n58 - 1.0 };
        let low = QuantThresholds { t_q_9_16: n916 + 1.0, t_q_5_8: n58 + 1.0 };
        assert_eq!(effective_bits(&d, &keep), Bits::B16);
        assert_eq!(effective_bits(&d, &mid), Bits::B8);
        assert_eq!(effective_bits(&d, &low), Bits::B4);
        assert_eq!(bit_share(&d, &keep, GateMode::Hard).weights, d.w16());
        assert_eq!(bit_share(&d, &mid, GateMode::Hard).weights, quantize(&w, 8).unwrap());
        assert_eq!(bit_share(&d, &low, GateMode::Hard).weights, quantize(&w, 4).unwrap());
    }

    #[test]
    fn bits_serde_as_numbers() {
        assert_eq!(serde_json::to_string(&Bits::B8).unwrap(), "8");
        assert_eq!(serde_json::from_str::<Bits>("16").unwrap(), Bits::B16);
        assert!(serde_json::from_str::<Bits>("2").is_err());
    }
}
