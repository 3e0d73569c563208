use serde::{Deserialize, Serialize};

use super::config::{LayerInfo, ModelSpec};
use super::group::{group_forward, prepare_weight, BatchNormParams, GroupPlan, GroupVars, Precision};
use super::net::{argmax_rows, Head, Stem, SuperNet, STEM_PARAMS};
use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::quantizer::Bits;
use crate::superkernel::{ArchDecision, MAX_KERNEL};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// A compact group holding only the weights of its chosen candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct SubGroup<T> {
    pub info: LayerInfo,
    pub arch: ArchDecision,
    pub bits: Bits,
    /// `[e*c_in, 1, k, k]`.
    pub depthwise: Tensor<T>,
    /// `[e*c_in, c_in, 1, 1]`.
    pub expand: Tensor<T>,
    pub bn1: BatchNormParams<T>,
    pub bn2: BatchNormParams<T>,
    /// `[c_out, e*c_in, 1, 1]`.
    pub project: Tensor<T>,
    pub bn3: BatchNormParams<T>,
}

/// A standalone network extracted from the supernet. Skipped layers are
/// `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Subnet<T = f32> {
    pub spec: ModelSpec,
    pub stem: Stem<T>,
    pub groups: Vec<Option<SubGroup<T>>>,
    pub head: Head<T>,
    pub input_resolution: usize,
    pub in_channels: usize,
}

impl<T: Scalar> SuperNet<T> {
    /// Copies out the weights selected by `spec` into compact tensors.
    pub fn extract_subnet(&self, spec: &ModelSpec) -> Result<Subnet<T>> {
        spec.validate(&self.layers())?;
        let mut groups = Vec::with_capacity(self.groups.len());
        for (i, g) in self.groups.iter().enumerate() {
            let arch = spec.arch[i];
            if arch.is_skip() {
                groups.push(None);
                continue;
            }
            let c_in = g.info.c_in;
            let hidden_full = g.kernel.channels();
            let hidden = arch.expand as usize * c_in;
            let k = arch.kernel as usize;
            let off = (MAX_KERNEL - k) / 2;
            let w = g.kernel.weights.data();
            let depthwise = Tensor::from_fn(&[hidden, 1, k, k], |idx| {
                let ch = idx / (k * k);
                let (r, c) = ((idx % (k * k)) / k, idx % k);
                w[ch * MAX_KERNEL * MAX_KERNEL + (r + off) * MAX_KERNEL + c + off]
            });
            let expand = Tensor::new(vec![hidden, c_in, 1, 1], g.expand.data()[..hidden * c_in].to_vec())?;
            let pd = g.project.data();
            let project = Tensor::from_fn(&[g.info.c_out, hidden, 1, 1], |idx| {
                pd[(idx / hidden) * hidden_full + idx % hidden]
            });
            groups.push(Some(SubGroup {
                info: g.info.clone(),
                arch,
                bits: spec.quant[i],
                depthwise,
                expand,
                bn1: g.bn1.truncate(hidden),
                bn2: g.bn2.truncate(hidden),
                project,
                bn3: g.bn3.clone(),
            }));
        }
        Ok(Subnet {
            spec: spec.clone(),
            stem: self.stem.clone(),
            groups,
            head: self.head.clone(),
            input_resolution: self.config.input_resolution,
            in_channels: self.config.in_channels,
        })
    }

    /// Bits needed to store the weights of `spec`: convolution weights of
    /// each group at its precision, everything else at 32 bits.
    pub fn model_size_bits(&self, spec: &ModelSpec) -> Result<u64> {
        Ok(self.extract_subnet(spec)?.size_bits())
    }
}

const SUBNET_KIND: &str = "subnet";
const GROUP_PARAMS: [&str; 9] = [
    "depthwise",
    "expand",
    "bn1.gamma",
    "bn1.beta",
    "bn2.gamma",
    "bn2.beta",
    "project",
    "bn3.gamma",
    "bn3.beta",
];

#[derive(Serialize, Deserialize)]
struct SubnetMeta {
    spec: ModelSpec,
    /// `None` for skipped layers.
    layers: Vec<Option<LayerInfo>>,
    input_resolution: usize,
    in_channels: usize,
    size_bits: u64,
}

impl<T: Scalar> Subnet<T> {
    /// Names matching [`Subnet::params`]; groups keep their supernet index.
    pub fn param_names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["stem.weight", "stem.bn.gamma", "stem.bn.beta"].map(String::from).to_vec();
        for (i, _) in self.groups.iter().enumerate().filter(|(_, g)| g.is_some()) {
            v.extend(GROUP_PARAMS.iter().map(|n| format!("group{i}.{n}")));
        }
        v.extend(["head.weight".to_string(), "head.bias".to_string()]);
        v
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.stem.weight, &self.stem.bn.gamma, &self.stem.bn.beta];
        for g in self.groups.iter().flatten() {
            v.extend([
                &g.depthwise,
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
        for g in self.groups.iter_mut().flatten() {
            v.extend([
                &mut g.depthwise,
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

    pub fn decay_flags(&self) -> Vec<bool> {
        let mut v = vec![true, false, false];
        for _ in self.groups.iter().flatten() {
            v.extend([true, true, false, false, false, false, true, false, false]);
        }
        v.extend([true, false]);
        v
    }

    /// Forward pass with quantization-aware (straight-through) weights, or
    /// float weights when `quantized` is false.
    pub fn forward(&self, tape: &mut Tape<T>, batch: &Tensor<T>, quantized: bool, train: bool) -> Result<(Var, Vec<Var>)> {
        let (_, c, h, w) = batch.dims4("subnet forward")?;
        let r = self.input_resolution;
        if c != self.in_channels || h != r || w != r {
            return Err(Error::shape(
                "subnet forward",
                format!("batch {:?} does not match input [N, {}, {r}, {r}]", batch.shape(), self.in_channels),
            ));
        }
        let params: Vec<Var> = self
            .params()
            .into_iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(train)))
            .collect();
        let x = tape.constant(batch.clone());
        let mut h = tape.conv2d(x, params[0], 1, 1, 1)?;
        h = tape.batchnorm(h, params[1], params[2])?;
        h = tape.relu6(h);
        let mut base = STEM_PARAMS;
        for g in self.groups.iter().flatten() {
            let precision = if quantized { Precision::Fixed(g.bits) } else { Precision::Float };
            let plan = GroupPlan {
                depthwise: prepare_weight(&g.depthwise, None, precision),
                expand: prepare_weight(&g.expand, None, precision),
                project: prepare_weight(&g.project, None, precision),
                channel_gate: None,
                branch_gate: None,
                residual: g.info.residual,
                stride: g.info.stride,
                bypass: false,
            };
            let vars = GroupVars::from_slice(&params[base..base + GroupVars::COUNT]);
            h = group_forward(tape, h, &vars, plan)?;
            base += GroupVars::COUNT;
        }
        let pooled = tape.global_avg_pool(h)?;
        let logits = tape.dense(pooled, params[base], params[base + 1])?;
        Ok((logits, params))
    }

    pub fn predict(&self, batch: &Tensor<T>) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let (logits, _) = self.forward(&mut tape, batch, true, false)?;
        Ok(argmax_rows(tape.value(logits)))
    }

    pub fn size_bits(&self) -> u64 {
        let mut bits: u64 = self.params().iter().map(|t| 32 * t.len() as u64).sum();
        for g in self.groups.iter().flatten() {
            let conv = (g.depthwise.len() + g.expand.len() + g.project.len()) as u64;
            bits -= conv * (32 - g.bits.count() as u64);
        }
        bits
    }

    /// Writes the compact weights back into the supernet, leaving the rest
    /// of the supernet untouched.
    pub fn write_back(&self, net: &mut SuperNet<T>) -> Result<()> {
        if net.groups.len() != self.groups.len() {
            return Err(Error::InvalidArgument("subnet and supernet layer counts differ".into()));
        }
        net.stem = self.stem.clone();
        net.head = self.head.clone();
        for (sg, g) in self.groups.iter().zip(net.groups.iter_mut()) {
            let Some(sg) = sg else { continue };
            let c_in = sg.info.c_in;
            let hidden = sg.depthwise.shape()[0];
            let hidden_full = g.kernel.channels();
            let k = sg.arch.kernel as usize;
            let off = (MAX_KERNEL - k) / 2;
            let w = g.kernel.weights.data_mut();
            for ch in 0..hidden {
                for r in 0..k {
                    for c in 0..k {
                        w[ch * MAX_KERNEL * MAX_KERNEL + (r + off) * MAX_KERNEL + c + off] = sg.depthwise.data()[(ch * k + r) * k + c];
                    }
                }
            }
            g.expand.data_mut()[..hidden * c_in].copy_from_slice(sg.expand.data());
            let pd = g.project.data_mut();
            for o in 0..sg.info.c_out {
                pd[o * hidden_full..o * hidden_full + hidden]
                    .copy_from_slice(&sg.project.data()[o * hidden..(o + 1) * hidden]);
            }
            for (dst, src) in [(&mut g.bn1, &sg.bn1), (&mut g.bn2, &sg.bn2)] {
                dst.gamma.data_mut()[..hidden].copy_from_slice(src.gamma.data());
                dst.beta.data_mut()[..hidden].copy_from_slice(src.beta.data());
            }
            g.bn3 = sg.bn3.clone();
        }
        Ok(())
    }
}

impl Subnet<f32> {
    pub fn to_archive(&self) -> Result<Archive> {
        let meta = SubnetMeta {
            spec: self.spec.clone(),
            layers: self.groups.iter().map(|g| g.as_ref().map(|g| g.info.clone())).collect(),
            input_resolution: self.input_resolution,
            in_channels: self.in_channels,
            size_bits: self.size_bits(),
        };
        let mut a = Archive::new(SUBNET_KIND, serde_json::to_value(meta)?);
        for (name, t) in self.param_names().into_iter().zip(self.params()) {
            a.push_tensor(name, t);
        }
        Ok(a)
    }

    /// Rebuilds a subnet saved by [`Subnet::to_archive`].
    pub fn from_archive(a: &Archive) -> Result<Self> {
        let meta: SubnetMeta =
            serde_json::from_value(a.meta.clone()).map_err(|e| Error::Data(format!("bad subnet manifest: {e}")))?;
        let bn = |prefix: &str| -> Result<BatchNormParams<f32>> {
            Ok(BatchNormParams {
                gamma: a.tensor(&format!("{prefix}.gamma"))?,
                beta: a.tensor(&format!("{prefix}.beta"))?,
            })
        };
        let mut groups = Vec::with_capacity(meta.spec.len());
        for (i, (&arch, &bits)) in meta.spec.arch.iter().zip(&meta.spec.quant).enumerate() {
            if arch.is_skip() {
                groups.push(None);
                continue;
            }
            let info = meta
                .layers
                .get(i)
                .cloned()
                .flatten()
                .ok_or_else(|| Error::Data(format!("subnet archive lacks layer {i}")))?;
            let p = |n: &str| format!("group{i}.{n}");
            groups.push(Some(SubGroup {
                info,
                arch,
                bits,
                depthwise: a.tensor(&p("depthwise"))?,
                expand: a.tensor(&p("expand"))?,
                bn1: bn(&p("bn1"))?,
                bn2: bn(&p("bn2"))?,
                project: a.tensor(&p("project"))?,
                bn3: bn(&p("bn3"))?,
            }));
        }
        Ok(Subnet {
            spec: meta.spec,
            stem: Stem {
                weight: a.tensor("stem.weight")?,
                bn: bn("stem.bn")?,
            },
            groups,
            head: Head {
                weight: a.tensor("head.weight")?,
                bias: a.tensor("head.bias")?,
            },
            input_resolution: meta.input_resolution,
            in_channels: meta.in_channels,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path, SUBNET_KIND)?)
    }
}
