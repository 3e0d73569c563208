use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::Bits;
use crate::superkernel::ArchDecision;

/// Shape of the MobileNetV2-like backbone.
///
/// Block `b` has `groups_per_block` groups, except the first and last blocks
/// which have one. The first group of a block applies the block stride.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub num_blocks: usize,
    pub groups_per_block: usize,
    pub in_channels: usize,
    pub stem_channels: usize,
    pub block_channels: Vec<usize>,
    pub block_strides: Vec<usize>,
    pub num_classes: usize,
    pub input_resolution: usize,
    /// Expose the skip decision on groups with an identity residual
    /// (never on the first or last block).
    #[serde(default)]
    pub allow_skip: bool,
}

impl Default for BackboneConfig {
    /// Desk-scale CIFAR-10 backbone: 14 searchable layers.
    fn default() -> Self {
        BackboneConfig {
            num_blocks: 5,
            groups_per_block: 4,
            in_channels: 3,
            stem_channels: 8,
            block_channels: vec![8, 16, 24, 32, 40],
            block_strides: vec![1, 2, 2, 2, 1],
            num_classes: 10,
            input_resolution: 32,
            allow_skip: false,
        }
    }
}

/// Static description of one searchable group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub index: usize,
    pub block: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub in_res: usize,
    pub out_res: usize,
    pub residual: bool,
    pub skip_allowed: bool,
}

impl LayerInfo {
    /// Multiply-accumulates of one image through this group.
    pub fn macs(&self, arch: ArchDecision) -> u64 {
        if arch.is_skip() {
            return 0;
        }
        let hidden = (arch.expand as usize * self.c_in) as u64;
        let k = arch.kernel as u64;
        let in_px = (self.in_res * self.in_res) as u64;
        let out_px = (self.out_res * self.out_res) as u64;
        self.c_in as u64 * hidden * in_px + k * k * hidden * out_px + hidden * self.c_out as u64 * out_px
    }
}

impl BackboneConfig {
    /// A small 14-layer backbone on 8x8 inputs, used by tests and examples.
    pub fn tiny(num_classes: usize) -> Self {
        BackboneConfig {
            num_blocks: 5,
            groups_per_block: 4,
            in_channels: 3,
            stem_channels: 4,
            block_channels: vec![4, 8, 8, 12, 16],
            block_strides: vec![1, 2, 1, 2, 1],
            num_classes,
            input_resolution: 8,
            allow_skip: false,
        }
    }

    /// Three blocks of one group each.
    pub fn minimal(num_classes: usize) -> Self {
        BackboneConfig {
            num_blocks: 3,
            groups_per_block: 1,
            in_channels: 3,
            stem_channels: 4,
            block_channels: vec![4, 6, 8],
            block_strides: vec![1, 2, 1],
            num_classes,
            input_resolution: 8,
            allow_skip: false,
        }
    }

    pub fn groups_in_block(&self, block: usize) -> usize {
        if block == 0 || block + 1 == self.num_blocks {
            1
        } else {
            self.groups_per_block
        }
    }

    /// `L = (num_blocks - 2) * groups_per_block + 2`.
    pub fn num_layers(&self) -> usize {
        (0..self.num_blocks).map(|b| self.groups_in_block(b)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_blocks < 2 {
            return fail(format!("num_blocks must be >= 2, got {}", self.num_blocks));
        }
        if self.groups_per_block == 0 {
            return fail("groups_per_block must be >= 1".into());
        }
        if self.block_channels.len() != self.num_blocks {
            return fail(format!(
                "block_channels has {} entries for {} blocks",
                self.block_channels.len(),
                self.num_blocks
            ));
        }
        if self.block_strides.len() != self.num_blocks {
            return fail(format!(
                "block_strides has {} entries for {} blocks",
                self.block_strides.len(),
                self.num_blocks
            ));
        }
        if self.in_channels == 0 || self.stem_channels == 0 || self.block_channels.contains(&0) {
            return fail("channel counts must be positive".into());
        }
        if let Some(s) = self.block_strides.iter().find(|&&s| s != 1 && s != 2) {
            return fail(format!("block stride {s} not in {{1, 2}}"));
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        let mut res = self.input_resolution;
        for (b, &s) in self.block_strides.iter().enumerate() {
            if res < 1 {
                return fail(format!("resolution collapses before block {b}"));
            }
            res = res.div_ceil(s);
        }
        if self.input_resolution == 0 {
            return fail("input_resolution must be positive".into());
        }
        Ok(())
    }

    /// Per-group layout in network order.
    pub fn layers(&self) -> Result<Vec<LayerInfo>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.num_layers());
        let mut c_in = self.stem_channels;
        let mut res = self.input_resolution;
        for b in 0..self.num_blocks {
            for g in 0..self.groups_in_block(b) {
                let stride = if g == 0 { self.block_strides[b] } else { 1 };
                let c_out = self.block_channels[b];
                // 5x5 kernel with padding 2.
                let out_res = (res + 4 - 5) / stride + 1;
                let residual = stride == 1 && c_in == c_out;
                let interior = b != 0 && b + 1 != self.num_blocks;
                out.push(LayerInfo {
                    index: out.len(),
                    block: b,
                    c_in,
                    c_out,
                    stride,
                    in_res: res,
                    out_res,
                    residual,
                    skip_allowed: self.allow_skip && residual && interior,
                });
                c_in = c_out;
                res = out_res;
            }
        }
        Ok(out)
    }

    /// Field-level differences that prevent warm-starting one backbone from
    /// another. The class count is excluded (the head is re-initialized).
    pub fn structural_diff(&self, other: &BackboneConfig) -> Vec<String> {
        let mut diff = Vec::new();
        macro_rules! cmp {
            ($($f:ident),*) => {$(
                if self.$f != other.$f {
                    diff.push(format!("{}: {:?} vs {:?}", stringify!($f), self.$f, other.$f));
                }
            )*};
        }
        cmp!(
            num_blocks,
            groups_per_block,
            in_channels,
            stem_channels,
            block_channels,
            block_strides,
            input_resolution,
            allow_skip
        );
        diff
    }
}

/// A searchable object: one architecture decision and one bit width per
/// layer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Vec<ArchDecision>,
    pub quant: Vec<Bits>,
}

impl ModelSpec {
    /// Every layer at 5x5, expansion 6, with the given precision.
    pub fn uniform(layers: usize, arch: ArchDecision, bits: Bits) -> Self {
        ModelSpec {
            arch: vec![arch; layers],
            quant: vec![bits; layers],
        }
    }

    pub fn len(&self) -> usize {
        self.arch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arch.is_empty()
    }

    /// Checks lengths and skip feasibility against a layer plan.
    pub fn validate(&self, layers: &[LayerInfo]) -> Result<()> {
        if self.arch.len() != layers.len() || self.quant.len() != layers.len() {
            return Err(Error::InvalidArgument(format!(
                "spec has {} arch / {} quant entries for {} layers",
                self.arch.len(),
                self.quant.len(),
                layers.len()
            )));
        }
        for (i, (a, l)) in self.arch.iter().zip(layers).enumerate() {
            ArchDecision::new(a.kernel, a.expand)?;
            if a.is_skip() && !l.skip_allowed {
                return Err(Error::InvalidArgument(format!(
                    "layer {i} cannot be skipped"
                )));
            }
        }
        Ok(())
    }
}

/// Exact size of the joint search space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchSpaceCount {
    pub n_arch: BigUint,
    pub n_quant: BigUint,
    pub total: BigUint,
}

/// `4^L` architectures (5 options on skippable layers) times `3^L` precision
/// policies.
pub fn count_space(cfg: &BackboneConfig) -> Result<SearchSpaceCount> {
    let layers = cfg.layers()?;
    let skippable = layers.iter().filter(|l| l.skip_allowed).count();
    Ok(count_for_layers(layers.len(), skippable))
}

pub fn count_for_layers(layers: usize, skippable: usize) -> SearchSpaceCount {
    let n_arch = BigUint::from(4u32).pow((layers - skippable) as u32)
        * BigUint::from(5u32).pow(skippable as u32);
    let n_quant = BigUint::from(3u32).pow(layers as u32);
    let total = &n_arch * &n_quant;
    SearchSpaceCount {
        n_arch,
        n_quant,
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_counts() {
        assert_eq!(BackboneConfig::default().num_layers(), 14);
        let seven = BackboneConfig {
            num_blocks: 7,
            block_channels: vec![8; 7],
            block_strides: vec![1; 7],
            ..BackboneConfig::default()
        };
        assert_eq!(seven.num_layers(), 22);
        assert_eq!(BackboneConfig::minimal(10).num_layers(), 3);
    }

    #[test]
    fn count_single_layer() {
        assert_eq!(count_for_layers(1, 0).total, BigUint::from(12u32));
    }

    #[test]
    fn residual_and_skip_flags() {
        let cfg = BackboneConfig {
            allow_skip: true,
            ..BackboneConfig::default()
        };
        let layers = cfg.layers().unwrap();
        assert!(layers[0].residual); // stem 8 -> 8, stride 1
        assert!(!layers[0].skip_allowed); // first block
        assert!(!layers[1].residual); // stride 2
        assert!(layers[2].skip_allowed);
        assert!(!layers[13].skip_allowed); // last block
        assert_eq!(layers[13].out_res, 4);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = BackboneConfig::default();
        c.block_strides[1] = 3;
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::default();
        c.block_channels.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn macs_of_depthwise_three_by_three() {
        let l = LayerInfo {
            index: 0,
            block: 0,
            c_in: 2,
            c_out: 2,
            stride: 1,
            in_res: 4,
            out_res: 4,
            residual: true,
            skip_allowed: false,
        };
        let a = ArchDecision { kernel: 3, expand: 3 };
        // pointwise 2*6*16 + depthwise 9*6*16 + linear 6*2*16
        assert_eq!(l.macs(a), 192 + 864 + 192);
        assert_eq!(l.macs(ArchDecision::SKIP), 0);
    }
}
