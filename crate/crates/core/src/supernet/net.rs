use rand::RngCore;
use rand_distr::{Distribution, Normal};

use super::config::{BackboneConfig, LayerInfo, ModelSpec};
use super::group::{group_forward, prepare_weight, BatchNormParams, GroupPlan, GroupVars, Precision};
use crate::error::{Error, Result};
use crate::quantizer::Bits;
use crate::superkernel::{self, ArchDecision, SubsetDropout, SuperKernel};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// He-style fan-in normal initialization.
pub(crate) fn he_normal<T: Scalar, R: RngCore + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stem<T> {
    /// `[stem_channels, in_channels, 3, 3]`.
    pub weight: Tensor<T>,
    pub bn: BatchNormParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    /// `[features, classes]`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Head<T> {
    pub fn init<R: RngCore + ?Sized>(features: usize, classes: usize, rng: &mut R) -> Self {
        let std = (1.0 / features as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        Head {
            weight: Tensor::from_fn(&[features, classes], |_| T::lit(dist.sample(rng))),
            bias: Tensor::zeros(&[classes]),
        }
    }
}

/// A searchable group: its super-kernel plus the non-searchable pointwise
/// convolutions and batch-norm parameters, all sized for expansion 6.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperGroup<T> {
    pub info: LayerInfo,
    pub kernel: SuperKernel<T>,
    /// `[6*c_in, c_in, 1, 1]`.
    pub expand: Tensor<T>,
    pub bn1: BatchNormParams<T>,
    pub bn2: BatchNormParams<T>,
    /// `[c_out, 6*c_in, 1, 1]`.
    pub project: Tensor<T>,
    pub bn3: BatchNormParams<T>,
}

/// How decisions are resolved in a forward pass.
pub enum ForwardMode<'a> {
    /// Sigmoid relaxation (weight training).
    Soft,
    /// One spec sampled from the decision probabilities.
    Sampled(&'a mut dyn RngCore),
    /// The determinized spec.
    Hard,
    /// A given spec, quantized.
    Spec(&'a ModelSpec),
    /// A given spec without quantization.
    Float(&'a ModelSpec),
}

/// Subset dropout for one forward pass.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut dyn RngCore,
}

/// Output of [`SuperNet::forward`].
#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    /// Parameter handles in [`SuperNet::params`] order.
    pub params: Vec<Var>,
    /// The spec used in sampled/hard/spec modes.
    pub spec: Option<ModelSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuperNet<T = f32> {
    pub config: BackboneConfig,
    pub stem: Stem<T>,
    pub groups: Vec<SuperGroup<T>>,
    pub head: Head<T>,
}

pub(crate) const STEM_PARAMS: usize = 3;

impl<T: Scalar> SuperNet<T> {
    /// Allocates and initializes all parameters; thresholds start at
    /// probability 0.5.
    pub fn build<R: RngCore + ?Sized>(config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        let layers = config.layers()?;
        let stem = Stem {
            weight: he_normal(&[config.stem_channels, config.in_channels, 3, 3], config.in_channels * 9, rng),
            bn: BatchNormParams::new(config.stem_channels),
        };
        let mut groups = Vec::with_capacity(layers.len());
        for info in layers {
            let hidden = superkernel::MAX_EXPAND * info.c_in;
            let expand = he_normal(&[hidden, info.c_in, 1, 1], info.c_in, rng);
            let dw = he_normal(&[hidden, 1, 5, 5], 25, rng);
            let project = he_normal(&[info.c_out, hidden, 1, 1], hidden, rng);
            groups.push(SuperGroup {
                kernel: SuperKernel::new(info.c_in, dw, info.skip_allowed)?,
                expand,
                bn1: BatchNormParams::new(hidden),
                bn2: BatchNormParams::new(hidden),
                project,
                bn3: BatchNormParams::new(info.c_out),
                info,
            });
        }
        let features = *config.block_channels.last().expect("validated");
        Ok(SuperNet {
            config: config.clone(),
            stem,
            groups,
            head: Head::init(features, config.num_classes, rng),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.groups.len()
    }

    pub fn layers(&self) -> Vec<LayerInfo> {
        self.groups.iter().map(|g| g.info.clone()).collect()
    }

    /// All trainable tensors in canonical order: stem (weight, gamma, beta),
    /// per group (depthwise, expand, bn1, bn2, project, bn3), head (weight,
    /// bias).
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.stem.weight, &self.stem.bn.gamma, &self.stem.bn.beta];
        for g in &self.groups {
            v.extend([
                &g.kernel.weights,
                &g.expand,
                &g.bn1.gamma,
                &g.bn1.beta,
                &g.bn2.gamma,
                &g.bn2.beta,
                &g.project,
                &g.bn3.gamma,
                &g.bn3.beta,
            ]);
        }
        v.extend([&self.head.weight, &self.head.bias]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.stem.weight, &mut self.stem.bn.gamma, &mut self.stem.bn.beta];
        for g in &mut self.groups {
            v.extend([
                &mut g.kernel.weights,
                &mut g.expand,
                &mut g.bn1.gamma,
                &mut g.bn1.beta,
                &mut g.bn2.gamma,
                &mut g.bn2.beta,
                &mut g.project,
                &mut g.bn3.gamma,
                &mut g.bn3.beta,
            ]);
        }
        v.extend([&mut self.head.weight, &mut self.head.bias]);
        v
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["stem.weight", "stem.bn.gamma", "stem.bn.beta"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for i in 0..self.groups.len() {
            for n in [
                "depthwise",
                "expand",
                "bn1.gamma",
                "bn1.beta",
                "bn2.gamma",
                "bn2.beta",
                "project",
                "bn3.gamma",
                "bn3.beta",
            ] {
                v.push(format!("group{i}.{n}"));
            }
        }
        v.extend(["head.weight".to_string(), "head.bias".to_string()]);
        v
    }

    /// Weight decay applies to convolution and dense weights only.
    pub fn decay_flags(&self) -> Vec<bool> {
        self.param_names()
            .iter()
            .map(|n| !(n.contains("gamma") || n.contains("beta") || n.ends_with("bias")))
            .collect()
    }

    pub fn head_param_range(&self) -> std::ops::Range<usize> {
        let n = STEM_PARAMS + GroupVars::COUNT * self.groups.len();
        n..n + 2
    }

    /// Re-initializes the classifier for a new class count.
    pub fn reset_head<R: RngCore + ?Sized>(&mut self, num_classes: usize, rng: &mut R) {
        let features = self.head.weight.shape()[0];
        self.head = Head::init(features, num_classes, rng);
        self.config.num_classes = num_classes;
    }

    pub fn thresholds(&self) -> Vec<[f64; 5]> {
        self.groups.iter().map(|g| g.kernel.thresholds()).collect()
    }

    /// Current decisions with every sigmoid degenerated to 0-1.
    pub fn determinize(&self) -> ModelSpec {
        let (arch, quant) = self.groups.iter().map(|g| g.kernel.determinize()).unzip();
        ModelSpec { arch, quant }
    }

    pub fn sample_spec<R: RngCore + ?Sized>(&self, rng: &mut R) -> ModelSpec {
        let (arch, quant) = self.groups.iter().map(|g| g.kernel.sample(rng)).unzip();
        ModelSpec { arch, quant }
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = batch.dims4("supernet forward")?;
        let r = self.config.input_resolution;
        if c != self.config.in_channels || h != r || w != r {
            return Err(Error::shape(
                "supernet forward",
                format!(
                    "batch {:?} does not match backbone input [N, {}, {r}, {r}]",
                    batch.shape(),
                    self.config.in_channels
                ),
            ));
        }
        Ok(())
    }

    fn soft_plan(&self, g: &SuperGroup<T>, dropout: SubsetDropout) -> GroupPlan<T> {
        let p = g.kernel.decision_probabilities(false);
        let hidden = g.kernel.channels();
        let half = hidden / 2;
        let precision = Precision::Soft {
            outer: p.p_drop_9_16,
            inner: p.p_drop_5_8,
        };
        let upper = T::lit(p.p_e6 * dropout.upper);
        let gate = (0..hidden).map(|c| if c < half { T::one() } else { upper }).collect();
        GroupPlan {
            depthwise: prepare_weight(&g.kernel.weights, Some(&g.kernel.soft_mask(dropout)), precision),
            expand: prepare_weight(&g.expand, None, precision),
            project: prepare_weight(&g.project, None, precision),
            channel_gate: Some(gate),
            branch_gate: g.kernel.skip_allowed.then(|| T::lit(p.p_keep)),
            residual: g.info.residual,
            stride: g.info.stride,
            bypass: false,
        }
    }

    fn spec_plan(&self, g: &SuperGroup<T>, arch: ArchDecision, bits: Option<Bits>) -> Result<GroupPlan<T>> {
        let mask = g.kernel.decision_mask(arch, SubsetDropout::NONE)?;
        let hidden = g.kernel.channels();
        let active = arch.expand as usize * g.info.c_in;
        let precision = bits.map_or(Precision::Float, Precision::Fixed);
        let row_mask = Tensor::from_fn(g.expand.shape(), |i| if i / g.info.c_in < active { T::one() } else { T::zero() });
        let col_mask = Tensor::from_fn(g.project.shape(), |i| if i % hidden < active { T::one() } else { T::zero() });
        let gate = (0..hidden).map(|c| if c < active { T::one() } else { T::zero() }).collect();
        Ok(GroupPlan {
            depthwise: prepare_weight(&g.kernel.weights, Some(&mask), precision),
            expand: prepare_weight(&g.expand, Some(&row_mask), precision),
            project: prepare_weight(&g.project, Some(&col_mask), precision),
            channel_gate: Some(gate),
            branch_gate: None,
            residual: g.info.residual,
            stride: g.info.stride,
            bypass: arch.is_skip(),
        })
    }

    /// Forward pass to logits. `train` records parameters as differentiable
    /// leaves; otherwise they are constants.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        batch: &Tensor<T>,
        mode: ForwardMode<'_>,
        mut dropout: Option<Dropout<'_>>,
        train: bool,
    ) -> Result<Forward> {
        self.check_input(batch)?;
        let quantized = !matches!(mode, ForwardMode::Float(_));
        let spec = match mode {
            ForwardMode::Soft => None,
            ForwardMode::Sampled(rng) => Some(self.sample_spec(rng)),
            ForwardMode::Hard => Some(self.determinize()),
            ForwardMode::Spec(s) | ForwardMode::Float(s) => Some(s.clone()),
        };
        if let Some(s) = &spec {
            s.validate(&self.layers())?;
        }

        let params: Vec<Var> = self
            .params()
            .into_iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(train)))
            .collect();
        let x = tape.constant(batch.clone());
        let w = params[0];
        let mut h = tape.conv2d(x, w, 1, 1, 1)?;
        h = tape.batchnorm(h, params[1], params[2])?;
        h = tape.relu6(h);

        for (i, g) in self.groups.iter().enumerate() {
            let plan = match &spec {
                None => {
                    let d = match dropout.as_mut() {
                        Some(dr) => superkernel::subset_dropout(dr.rate, &mut *dr.rng)?,
                        None => SubsetDropout::NONE,
                    };
                    self.soft_plan(g, d)
                }
                Some(s) => self.spec_plan(g, s.arch[i], quantized.then_some(s.quant[i]))?,
            };
            let base = STEM_PARAMS + i * GroupVars::COUNT;
            let vars = GroupVars::from_slice(&params[base..base + GroupVars::COUNT]);
            h = group_forward(tape, h, &vars, plan)?;
        }

        let pooled = tape.global_avg_pool(h)?;
        let hp = self.head_param_range();
        let logits = tape.dense(pooled, params[hp.start], params[hp.start + 1])?;
        Ok(Forward {
            logits,
            params,
            spec,
        })
    }

    /// Top-1 predictions for a batch under a fixed spec.
    pub fn predict(&self, batch: &Tensor<T>, spec: &ModelSpec) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, batch, ForwardMode::Spec(spec), None, false)?;
        Ok(argmax_rows(tape.value(f.logits)))
    }
}

pub(crate) fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
