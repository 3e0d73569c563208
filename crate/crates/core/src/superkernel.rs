//! The over-parameterized depthwise super-kernel.
//!
//! One `[6*C_in, 1, 5, 5]` tensor holds every candidate depthwise kernel of a
//! group. Three relaxed decisions carve a candidate out of it:
//!
//! - kernel size: keep the outer ring of the 5x5 window (`w_55\33`) or only
//!   the centered 3x3 core;
//! - skip: keep the kernel at all (only where the group has a residual path);
//! - expansion: keep the upper half of the channels (`w_{k,6\3}`) or only the
//!   lower `3*C_in` channels.
//!
//! Each decision is `sigma(||subset||^2 - t)` with a learned threshold `t`.
//! The composed kernel then goes through bit-sharing, with two more decisions
//! selecting 16, 8 or 4 bits.
//!
//! All five sigmoid arguments are computed from the soft composition, so the
//! decisions are independent Bernoulli variables given the current weights and
//! thresholds.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::{self, GateMode};
use crate::quantizer::{self, Bits, QuantThresholds};
use crate::tensor::{Scalar, Tensor};

pub const MAX_KERNEL: usize = 5;
pub const MAX_EXPAND: usize = 6;
const TAPS: usize = MAX_KERNEL * MAX_KERNEL;

/// Whether tap `p` (row-major in the 5x5 window) lies on the outer ring.
pub fn is_outer_tap(p: usize) -> bool {
    let (i, j) = (p / MAX_KERNEL, p % MAX_KERNEL);
    i == 0 || j == 0 || i == MAX_KERNEL - 1 || j == MAX_KERNEL - 1
}

/// Discrete architecture of one searchable layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchDecision {
    /// 3 or 5.
    pub kernel: u8,
    /// 0 (skip), 3 or 6.
    pub expand: u8,
}

impl ArchDecision {
    pub const SKIP: ArchDecision = ArchDecision {
        kernel: 3,
        expand: 0,
    };
    pub const MAX: ArchDecision = ArchDecision {
        kernel: 5,
        expand: 6,
    };

    pub fn new(kernel: u8, expand: u8) -> Result<Self> {
        if !matches!(kernel, 3 | 5) || !matches!(expand, 0 | 3 | 6) {
            return Err(Error::InvalidArgument(format!(
                "architecture decision kernel={kernel} expand={expand} outside {{3,5}} x {{0,3,6}}"
            )));
        }
        Ok(ArchDecision { kernel, expand })
    }

    pub fn is_skip(&self) -> bool {
        self.expand == 0
    }

    /// The four non-skip options.
    pub fn options() -> [ArchDecision; 4] {
        [
            ArchDecision { kernel: 3, expand: 3 },
            ArchDecision { kernel: 3, expand: 6 },
            ArchDecision { kernel: 5, expand: 3 },
            ArchDecision { kernel: 5, expand: 6 },
        ]
    }
}

/// Sigmoid arguments of the five decisions of one super-kernel.
///
/// Architecture decisions are oriented "include" (`||w||^2 - t`), quantization
/// decisions "leave out" (`t - ||r||^2`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecisionArgs {
    pub k5: f64,
    pub keep: f64,
    pub e6: f64,
    pub drop_9_16: f64,
    pub drop_5_8: f64,
}

/// Probabilities of the five decisions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionProbabilities {
    pub p_k5: f64,
    pub p_keep: f64,
    pub p_e6: f64,
    pub p_drop_9_16: f64,
    pub p_drop_5_8: f64,
}

impl DecisionProbabilities {
    /// Probability of a realized (architecture, precision) outcome.
    pub fn probability(&self, arch: ArchDecision, bits: Bits) -> f64 {
        self.log_prob(arch, bits).exp()
    }

    /// Sum of the log Bernoulli probabilities of the decisions that the
    /// outcome actually depends on.
    pub fn log_prob(&self, arch: ArchDecision, bits: Bits) -> f64 {
        let lp = |p: f64, on: bool| if on { p.ln() } else { (1.0 - p).ln() };
        let mut total = 0.0;
        if arch.is_skip() {
            total += lp(self.p_keep, false);
        } else {
            if self.p_keep < 1.0 {
                total += lp(self.p_keep, true);
            }
            total += lp(self.p_k5, arch.kernel == 5) + lp(self.p_e6, arch.expand == 6);
        }
        match bits {
            Bits::B16 => total += lp(self.p_drop_9_16, false),
            Bits::B8 => total += lp(self.p_drop_9_16, true) + lp(self.p_drop_5_8, false),
            Bits::B4 => total += lp(self.p_drop_9_16, true) + lp(self.p_drop_5_8, true),
        }
        total
    }

    /// Gradient of [`log_prob`](Self::log_prob) with respect to each
    /// threshold, treating the subset norms as constants.
    pub fn log_prob_grad(&self, arch: ArchDecision, bits: Bits, skip_allowed: bool) -> ThresholdGrads {
        // include orientation: d/dt log sigma(n - t) = -(1 - p), d/dt log(1 - p) = p
        let include = |p: f64, on: bool| if on { -(1.0 - p) } else { p };
        // leave-out orientation: d/dt log sigma(t - n) = 1 - p, d/dt log(1 - p) = -p
        let leave_out = |p: f64, on: bool| if on { 1.0 - p } else { -p };
        let mut g = ThresholdGrads::default();
        if skip_allowed {
            g.t_e3 = include(self.p_keep, !arch.is_skip());
        }
        if !arch.is_skip() {
            g.t_k5 = include(self.p_k5, arch.kernel == 5);
            g.t_e6 = include(self.p_e6, arch.expand == 6);
        }
        g.t_q_9_16 = leave_out(self.p_drop_9_16, bits != Bits::B16);
        if bits != Bits::B16 {
            g.t_q_5_8 = leave_out(self.p_drop_5_8, bits == Bits::B4);
        }
        g
    }
}

/// Per-threshold scalars (gradients or updates), one per decision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrads {
    pub t_k5: f64,
    pub t_e3: f64,
    pub t_e6: f64,
    pub t_q_9_16: f64,
    pub t_q_5_8: f64,
}

impl ThresholdGrads {
    pub fn scaled_add(&mut self, other: &ThresholdGrads, factor: f64) {
        self.t_k5 += factor * other.t_k5;
        self.t_e3 += factor * other.t_e3;
        self.t_e6 += factor * other.t_e6;
        self.t_q_9_16 += factor * other.t_q_9_16;
        self.t_q_5_8 += factor * other.t_q_5_8;
    }
}

/// Result of [`SuperKernel::compose`].
#[derive(Clone, Debug, PartialEq)]
pub struct Composition<T> {
    /// `mask * weights`.
    pub kernel: Tensor<T>,
    /// Multiplicative mask applied to the raw weights.
    pub mask: Tensor<T>,
    /// The realized decision in sampled and hard modes.
    pub decision: Option<ArchDecision>,
}

/// Per-step subset dropout factors: 0 for a dropped subset, `1/(1-rate)` for
/// a kept one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubsetDropout {
    pub outer: f64,
    pub upper: f64,
}

impl SubsetDropout {
    pub const NONE: SubsetDropout = SubsetDropout {
        outer: 1.0,
        upper: 1.0,
    };
}

/// Draws the dropout factors of one step for the two optional subsets
/// (`w_55\33` and `w_{.,6\3}`).
pub fn subset_dropout<R: RngCore + ?Sized>(rate: f64, rng: &mut R) -> Result<SubsetDropout> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "subset dropout rate {rate} outside [0, 1)"
        )));
    }
    if rate == 0.0 {
        return Ok(SubsetDropout::NONE);
    }
    let keep = 1.0 / (1.0 - rate);
    let mut draw = || if gate::bernoulli(rng, rate) { 0.0 } else { keep };
    let outer = draw();
    let upper = draw();
    Ok(SubsetDropout { outer, upper })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuperKernel<T = f32> {
    /// `[6*c_in, 1, 5, 5]`.
    pub weights: Tensor<T>,
    pub c_in: usize,
    pub t_k5: f64,
    pub t_e3: f64,
    pub t_e6: f64,
    pub quant: QuantThresholds,
    pub skip_allowed: bool,
}

impl<T: Scalar> SuperKernel<T> {
    /// Wraps existing weights and sets every threshold so that each decision
    /// starts at probability 0.5.
    pub fn new(c_in: usize, weights: Tensor<T>, skip_allowed: bool) -> Result<Self> {
        let expected = [MAX_EXPAND * c_in, 1, MAX_KERNEL, MAX_KERNEL];
        if c_in == 0 || weights.shape() != expected {
            return Err(Error::shape(
                "superkernel",
                format!("weights {:?}, expected {:?}", weights.shape(), expected),
            ));
        }
        let mut sk = SuperKernel {
            weights,
            c_in,
            t_k5: 0.0,
            t_e3: 0.0,
            t_e6: 0.0,
            quant: QuantThresholds {
                t_q_9_16: 0.0,
                t_q_5_8: 0.0,
            },
            skip_allowed,
        };
        sk.init_thresholds();
        Ok(sk)
    }

    pub fn channels(&self) -> usize {
        MAX_EXPAND * self.c_in
    }

    fn half(&self) -> usize {
        3 * self.c_in
    }

    /// Sets each threshold to its paired subset norm, in decision order, so
    /// every sigmoid argument is exactly zero.
    pub fn init_thresholds(&mut self) {
        self.t_k5 = self.outer_norm_sq();
        let s_k5 = 0.5;
        let (lower, upper) = self.half_norms_sq(s_k5);
        self.t_e3 = lower;
        self.t_e6 = upper;
        let s_keep = if self.skip_allowed { 0.5 } else { 1.0 };
        let d = self.soft_decomposition(s_k5, s_keep, 0.5);
        self.quant = QuantThresholds {
            t_q_9_16: d.norm_sq_9_16(),
            t_q_5_8: d.norm_sq_5_8(),
        };
    }

    /// `||w_55\33||^2` over all channels.
    pub fn outer_norm_sq(&self) -> f64 {
        let mut acc = 0.0;
        for (i, &w) in self.weights.data().iter().enumerate() {
            if is_outer_tap(i % TAPS) {
                let v = w.to_f64_lossy();
                acc += v * v;
            }
        }
        acc
    }

    /// `(||w_{k,3}||^2, ||w_{k,6\3}||^2)` of `w_k = w33 + s_k5 * w_55\33`.
    fn half_norms_sq(&self, s_k5: f64) -> (f64, f64) {
        let ring = s_k5 * s_k5;
        let mut halves = [0.0f64; 2];
        for (i, &w) in self.weights.data().iter().enumerate() {
            let v = w.to_f64_lossy();
            let f = if is_outer_tap(i % TAPS) { ring } else { 1.0 };
            halves[usize::from(i / TAPS >= self.half())] += f * v * v;
        }
        (halves[0], halves[1])
    }

    /// Multiplicative mask for given per-subset factors.
    fn mask(&self, s_k5: f64, s_keep: f64, s_e6: f64, dropout: SubsetDropout) -> Tensor<T> {
        let half = self.half();
        Tensor::from_fn(self.weights.shape(), |i| {
            let ch = i / TAPS;
            let mut m = s_keep;
            if is_outer_tap(i % TAPS) {
                m *= s_k5 * dropout.outer;
            }
            if ch >= half {
                m *= s_e6 * dropout.upper;
            }
            T::lit(m)
        })
    }

    fn soft_decomposition(&self, s_k5: f64, s_keep: f64, s_e6: f64) -> quantizer::BitDecomposition<T> {
        let m = self.mask(s_k5, s_keep, s_e6, SubsetDropout::NONE);
        let w = self
            .weights
            .zip_map(&m, |a, b| a * b)
            .expect("mask shares the weight shape");
        let support: Vec<bool> = m.data().iter().map(|&v| v != T::zero()).collect();
        let params = quantizer::norm_fit_where(w.data(), &support);
        quantizer::decompose_with(&w, &params)
    }

    /// Sigmoid arguments of all five decisions.
    pub fn decision_args(&self) -> DecisionArgs {
        let k5 = gate::indicator(self.outer_norm_sq(), self.t_k5);
        let s_k5 = gate::sigmoid(k5);
        let (lower, upper) = self.half_norms_sq(s_k5);
        let keep = gate::indicator(lower, self.t_e3);
        let e6 = gate::indicator(upper, self.t_e6);
        let s_keep = if self.skip_allowed { gate::sigmoid(keep) } else { 1.0 };
        let d = self.soft_decomposition(s_k5, s_keep, gate::sigmoid(e6));
        DecisionArgs {
            k5,
            keep,
            e6,
            drop_9_16: gate::inverted_indicator(self.quant.t_q_9_16, d.norm_sq_9_16()),
            drop_5_8: gate::inverted_indicator(self.quant.t_q_5_8, d.norm_sq_5_8()),
        }
    }

    /// Probabilities used for sampling and for the REINFORCE log-probability.
    /// With `hard = true` each sigmoid is degenerated to a 0-1 step.
    pub fn decision_probabilities(&self, hard: bool) -> DecisionProbabilities {
        let a = self.decision_args();
        let f = if hard { gate::hard } else { gate::sigmoid };
        DecisionProbabilities {
            p_k5: f(a.k5),
            p_keep: if self.skip_allowed { f(a.keep) } else { 1.0 },
            p_e6: f(a.e6),
            p_drop_9_16: f(a.drop_9_16),
            p_drop_5_8: f(a.drop_5_8),
        }
    }

    /// Draws one (architecture, precision) outcome. Decisions that cannot
    /// affect the outcome (kernel/expansion of a skipped layer, the 5..8 bits
    /// when 9..16 are kept) are not drawn.
    pub fn sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> (ArchDecision, Bits) {
        let p = self.decision_probabilities(false);
        sample_outcome(&p, self.skip_allowed, rng)
    }

    /// Final decision with every sigmoid replaced by `1[arg >= 0]`.
    pub fn determinize(&self) -> (ArchDecision, Bits) {
        let p = self.decision_probabilities(true);
        let keep = !self.skip_allowed || p.p_keep == 1.0;
        let arch = if keep {
            ArchDecision {
                kernel: if p.p_k5 == 1.0 { 5 } else { 3 },
                expand: if p.p_e6 == 1.0 { 6 } else { 3 },
            }
        } else {
            ArchDecision::SKIP
        };
        (arch, Bits::from_drops(p.p_drop_9_16 == 1.0, p.p_drop_5_8 == 1.0))
    }

    /// Mask selecting exactly the weights of a discrete architecture.
    pub fn decision_mask(&self, arch: ArchDecision, dropout: SubsetDropout) -> Result<Tensor<T>> {
        if arch.is_skip() && !self.skip_allowed {
            return Err(Error::InvalidArgument(
                "skip requested on a layer where skip is not allowed".into(),
            ));
        }
        let on = |b: bool| if b { 1.0 } else { 0.0 };
        Ok(self.mask(
            on(arch.kernel == 5),
            on(!arch.is_skip()),
            on(arch.expand == 6),
            dropout,
        ))
    }

    /// Mask of the soft relaxation: `s_keep * (w_k,3 + s_e6 * w_k,6\3)` with
    /// `w_k = w33 + s_k5 * w_55\33`.
    pub fn soft_mask(&self, dropout: SubsetDropout) -> Tensor<T> {
        let p = self.decision_probabilities(false);
        self.mask(p.p_k5, p.p_keep, p.p_e6, dropout)
    }

    /// Builds the effective kernel.
    pub fn compose(&self, mode: GateMode<'_>) -> Composition<T> {
        let (mask, decision) = match mode {
            GateMode::Soft => (self.soft_mask(SubsetDropout::NONE), None),
            GateMode::Sampled(rng) => {
                let (arch, _) = self.sample(rng);
                (self.decision_mask(arch, SubsetDropout::NONE).expect("sampled arch is feasible"), Some(arch))
            }
            GateMode::Hard => {
                let (arch, _) = self.determinize();
                (self.decision_mask(arch, SubsetDropout::NONE).expect("determinized arch is feasible"), Some(arch))
            }
        };
        let kernel = self
            .weights
            .zip_map(&mask, |a, b| a * b)
            .expect("mask shares the weight shape");
        Composition {
            kernel,
            mask,
            decision,
        }
    }

    /// Adds `step` to the thresholds.
    pub fn apply_threshold_step(&mut self, step: &ThresholdGrads) {
        self.t_k5 += step.t_k5;
        self.t_e3 += step.t_e3;
        self.t_e6 += step.t_e6;
        self.quant.t_q_9_16 += step.t_q_9_16;
        self.quant.t_q_5_8 += step.t_q_5_8;
    }

    pub fn thresholds(&self) -> [f64; 5] {
        [
            self.t_k5,
            self.t_e3,
            self.t_e6,
            self.quant.t_q_9_16,
            self.quant.t_q_5_8,
        ]
    }

    pub fn set_thresholds(&mut self, t: [f64; 5]) {
        self.t_k5 = t[0];
        self.t_e3 = t[1];
        self.t_e6 = t[2];
        self.quant = QuantThresholds {
            t_q_9_16: t[3],
            t_q_5_8: t[4],
        };
    }
}

/// Samples an outcome from decision probabilities (see
/// [`SuperKernel::sample`]).
pub fn sample_outcome<R: RngCore + ?Sized>(
    p: &DecisionProbabilities,
    skip_allowed: bool,
    rng: &mut R,
) -> (ArchDecision, Bits) {
    let keep = !skip_allowed || gate::bernoulli(rng, p.p_keep);
    let arch = if keep {
        let k5 = gate::bernoulli(rng, p.p_k5);
        let e6 = gate::bernoulli(rng, p.p_e6);
        ArchDecision {
            kernel: if k5 { 5 } else { 3 },
            expand: if e6 { 6 } else { 3 },
        }
    } else {
        ArchDecision::SKIP
    };
    let drop_hi = gate::bernoulli(rng, p.p_drop_9_16);
    let drop_mid = drop_hi && gate::bernoulli(rng, p.p_drop_5_8);
    (arch, Bits::from_drops(drop_hi, drop_mid))
}
