//! One MBConv group (pointwise expand -> depthwise -> linear projection),
//! shared by the supernet and extracted subnets.

use crate::error::Result;
use crate::quantizer::{self, Bits};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Batch-norm affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> BatchNormParams<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
        }
    }

    /// The first `channels` entries.
    pub fn truncate(&self, channels: usize) -> Self {
        let take = |t: &Tensor<T>| Tensor::new(vec![channels], t.data()[..channels].to_vec()).expect("prefix");
        BatchNormParams {
            gamma: take(&self.gamma),
            beta: take(&self.beta),
        }
    }
}

/// Precision applied to a group's convolution weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Precision {
    /// Unquantized.
    Float,
    /// Bit-sharing with relaxed multipliers `w16 - outer (r_9_16 + inner r_5_8)`.
    Soft { outer: f64, inner: f64 },
    /// Quantized at a fixed width.
    Fixed(Bits),
}

/// Effective weight of a convolution and the factor its gradient is scaled by
/// on the way back to the raw weight.
///
/// The raw weight is masked, quantized on the mask's support (normalization
/// fitted on that support only), and re-masked so excluded positions stay
/// exactly zero. Quantization is straight-through: the gradient with respect
/// to the raw weight is `mask * grad`.
pub fn prepare_weight<T: Scalar>(
    raw: &Tensor<T>,
    mask: Option<&Tensor<T>>,
    precision: Precision,
) -> (Tensor<T>, Tensor<T>) {
    let (masked, grad_scale) = match mask {
        Some(m) => (raw.zip_map(m, |a, b| a * b).expect("mask shape"), m.clone()),
        None => (raw.clone(), Tensor::ones(raw.shape())),
    };
    let bits_value = |outer: f64, inner: f64| {
        let support: Vec<bool> = grad_scale.data().iter().map(|&v| v != T::zero()).collect();
        let params = quantizer::norm_fit_where(masked.data(), &support);
        let composed = quantizer::decompose_with(&masked, &params).recompose(T::lit(outer), T::lit(inner));
        composed
            .zip_map(&grad_scale, |v, m| if m != T::zero() { v } else { T::zero() })
            .expect("mask shape")
    };
    let value = match precision {
        Precision::Float => masked,
        Precision::Soft { outer, inner } => bits_value(outer, inner),
        Precision::Fixed(b) => {
            let (o, i) = match b {
                Bits::B16 => (0.0, 0.0),
                Bits::B8 => (1.0, 0.0),
                Bits::B4 => (1.0, 1.0),
            };
            bits_value(o, i)
        }
    };
    (value, grad_scale)
}

/// Tape handles of a group's parameters, in canonical order.
#[derive(Clone, Copy, Debug)]
pub struct GroupVars {
    pub depthwise: Var,
    pub expand: Var,
    pub bn1: (Var, Var),
    pub bn2: (Var, Var),
    pub project: Var,
    pub bn3: (Var, Var),
}

impl GroupVars {
    pub const COUNT: usize = 9;

    pub fn from_slice(v: &[Var]) -> Self {
        GroupVars {
            depthwise: v[0],
            expand: v[1],
            bn1: (v[2], v[3]),
            bn2: (v[4], v[5]),
            project: v[6],
            bn3: (v[7], v[8]),
        }
    }
}

/// Everything constant about one group for one forward pass.
#[derive(Clone, Debug)]
pub struct GroupPlan<T> {
    pub depthwise: (Tensor<T>, Tensor<T>),
    pub expand: (Tensor<T>, Tensor<T>),
    pub project: (Tensor<T>, Tensor<T>),
    /// Post-activation multiplier per hidden channel.
    pub channel_gate: Option<Vec<T>>,
    /// Multiplier of the residual branch (skip relaxation); `None` is 1.
    pub branch_gate: Option<T>,
    pub residual: bool,
    pub stride: usize,
    /// Hard skip: the group is the identity.
    pub bypass: bool,
}

/// Runs one group. Batch norm uses the current batch's statistics.
pub fn group_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    vars: &GroupVars,
    plan: GroupPlan<T>,
) -> Result<Var> {
    if plan.bypass {
        return Ok(x);
    }
    let (ev, eg) = plan.expand;
    let expand = tape.surrogate(vars.expand, ev, eg)?;
    let mut h = tape.conv2d(x, expand, 1, 0, 1)?;
    h = tape.batchnorm(h, vars.bn1.0, vars.bn1.1)?;
    h = tape.relu6(h);

    let (dv, dg) = plan.depthwise;
    let channels = dv.shape()[0];
    let pad = dv.shape()[2] / 2;
    let dw = tape.surrogate(vars.depthwise, dv, dg)?;
    h = tape.conv2d(h, dw, plan.stride, pad, channels)?;
    h = tape.batchnorm(h, vars.bn2.0, vars.bn2.1)?;
    h = tape.relu6(h);
    if let Some(gate) = plan.channel_gate {
        h = tape.scale_channels(h, gate)?;
    }

    let (pv, pg) = plan.project;
    let project = tape.surrogate(vars.project, pv, pg)?;
    h = tape.conv2d(h, project, 1, 0, 1)?;
    h = tape.batchnorm(h, vars.bn3.0, vars.bn3.1)?;

    if plan.residual {
        if let Some(g) = plan.branch_gate {
            let c = tape.value(h).shape()[1];
            h = tape.scale_channels(h, vec![g; c])?;
        }
        h = tape.add(x, h)?;
    }
    Ok(h)
}
