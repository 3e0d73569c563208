//! Wengert-list reverse-mode differentiation over the op set in [`ops`].
//!
//! Nodes are appended in evaluation order, so a single reverse sweep visits
//! every consumer before its producers.

use super::ops::{self, BatchNormCache};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: BatchNormCache<T>,
    },
    Relu6(Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulConst {
        input: Var,
        factor: Tensor<T>,
    },
    ScaleChannels {
        input: Var,
        scales: Vec<T>,
    },
    Surrogate {
        input: Var,
        grad_scale: Tensor<T>,
    },
    GlobalAvgPool(Var),
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records an input; gradients are tracked iff `value.requires_grad()`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let needs = value.requires_grad();
        self.push(value, Op::Leaf, needs)
    }

    /// Records a trainable parameter.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    /// Records a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(kernel), stride, padding, groups)?;
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
                groups,
            },
            needs,
        ))
    }

    pub fn batchnorm(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (out, cache) = ops::batchnorm_batchstats(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            T::lit(ops::BATCHNORM_EPS),
        )?;
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            },
            needs,
        ))
    }

    pub fn relu6(&mut self, input: Var) -> Var {
        let out = ops::relu6(self.value(input));
        let needs = self.needs(input);
        self.push(out, Op::Relu6(input), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, input: Var, factor: Tensor<T>) -> Result<Var> {
        let out = self.value(input).zip_map(&factor, |x, f| x * f)?;
        let needs = self.needs(input);
        Ok(self.push(out, Op::MulConst { input, factor }, needs))
    }

    /// Multiplies channel `c` of an NCHW tensor by the constant `scales[c]`.
    pub fn scale_channels(&mut self, input: Var, scales: Vec<T>) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("scale_channels")?;
        if scales.len() != c {
            return Err(Error::shape(
                "scale_channels",
                format!("{} scales for {c} channels", scales.len()),
            ));
        }
        let plane = h * w;
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(src.len());
        for b in 0..n {
            for (ch, &s) in scales.iter().enumerate() {
                out.extend(src[(b * c + ch) * plane..][..plane].iter().map(|&x| x * s));
            }
        }
        let out = Tensor::new(self.value(input).shape().to_vec(), out)?;
        let needs = self.needs(input);
        Ok(self.push(out, Op::ScaleChannels { input, scales }, needs))
    }

    /// Emits `value` in the forward pass; in the backward pass the incoming
    /// gradient is multiplied elementwise by `grad_scale` and routed to
    /// `input`. Used for masked kernels (exact) and straight-through
    /// quantization (surrogate).
    pub fn surrogate(&mut self, input: Var, value: Tensor<T>, grad_scale: Tensor<T>) -> Result<Var> {
        let in_shape = self.value(input).shape();
        if value.shape() != in_shape || grad_scale.shape() != in_shape {
            return Err(Error::shape(
                "surrogate",
                format!(
                    "input {:?}, value {:?}, grad scale {:?}",
                    in_shape,
                    value.shape(),
                    grad_scale.shape()
                ),
            ));
        }
        let needs = self.needs(input);
        Ok(self.push(value, Op::Surrogate { input, grad_scale }, needs))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(input))?;
        let needs = self.needs(input);
        Ok(self.push(out, Op::GlobalAvgPool(input), needs))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::dense(self.value(input), self.value(weight), self.value(bias))?;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            out,
            Op::Dense {
                input,
                weight,
                bias,
            },
            needs,
        ))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).sum();
        let needs = self.needs(input);
        self.push(Tensor::scalar(s), Op::Sum(input), needs)
    }

    /// Reverse sweep from a single-element `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be a scalar, got {:?}", self.value(output).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), T::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let send = |v: Var, d: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| -> Result<()> {
                if !self.needs(v) {
                    return Ok(());
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(d.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(d),
                }
                Ok(())
            };
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    kernel,
                    stride,
                    padding,
                    groups,
                } => {
                    let (dx, dk) = ops::conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        &g,
                        *stride,
                        *padding,
                        *groups,
                        self.needs(*input),
                        self.needs(*kernel),
                    )?;
                    if let Some(dx) = dx {
                        send(*input, dx, &mut grads)?;
                    }
                    if let Some(dk) = dk {
                        send(*kernel, dk, &mut grads)?;
                    }
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (dx, dg, db) = ops::batchnorm_backward(&g, self.value(*gamma), cache)?;
                    send(*input, dx, &mut grads)?;
                    send(*gamma, dg, &mut grads)?;
                    send(*beta, db, &mut grads)?;
                }
                Op::Relu6(input) => {
                    let dx = ops::relu6_backward(self.value(*input), &g)?;
                    send(*input, dx, &mut grads)?;
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads)?;
                    send(*b, g, &mut grads)?;
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |x, y| x * y)?;
                    let db = g.zip_map(self.value(*a), |x, y| x * y)?;
                    send(*a, da, &mut grads)?;
                    send(*b, db, &mut grads)?;
                }
                Op::MulConst { input, factor } => {
                    send(*input, g.zip_map(factor, |x, f| x * f)?, &mut grads)?;
                }
                Op::ScaleChannels { input, scales } => {
                    let (n, c, h, w) = g.dims4("scale_channels")?;
                    let plane = h * w;
                    let mut d = g;
                    for b in 0..n {
                        for (ch, &s) in scales.iter().enumerate().take(c) {
                            for v in &mut d.data_mut()[(b * c + ch) * plane..][..plane] {
                                *v *= s;
                            }
                        }
                    }
                    send(*input, d, &mut grads)?;
                }
                Op::Surrogate { input, grad_scale } => {
                    send(*input, g.zip_map(grad_scale, |x, s| x * s)?, &mut grads)?;
                }
                Op::GlobalAvgPool(input) => {
                    let dx = ops::global_avg_pool_backward(self.value(*input).shape(), &g)?;
                    send(*input, dx, &mut grads)?;
                }
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => {
                    let (dx, dw, db) =
                        ops::dense_backward(self.value(*input), self.value(*weight), &g)?;
                    send(*input, dx, &mut grads)?;
                    send(*weight, dw, &mut grads)?;
                    send(*bias, db, &mut grads)?;
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let k = self.value(*logits).shape()[1];
                    let d = ops::softmax_cross_entropy_backward(probs, labels, k, g.item());
                    send(*logits, d, &mut grads)?;
                }
                Op::Sum(input) => {
                    let d = Tensor::full(self.value(*input).shape(), g.item());
                    send(*input, d, &mut grads)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        assert_eq!(tape.value(s).item(), 5.25);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let c = tape.constant(Tensor::ones(&[2]));
        let p = tape.param(Tensor::ones(&[2]));
        let y = tape.mul(c, p).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn surrogate_routes_scaled_gradient() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param(Tensor::new(vec![2], vec![0.3, 0.7]).unwrap());
        let q = tape
            .surrogate(
                w,
                Tensor::new(vec![2], vec![0.25, 0.75]).unwrap(),
                Tensor::new(vec![2], vec![1.0, 0.5]).unwrap(),
            )
            .unwrap();
        let s = tape.sum(q);
        assert_eq!(tape.value(s).item(), 1.0);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 0.5]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f32>::new();
        let p = tape.param(Tensor::ones(&[2]));
        assert!(tape.backward(p).is_err());
    }
}
