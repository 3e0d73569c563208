//! The weight-sharing, bit-sharing supernet and its extracted subnets.

mod config;
mod group;
mod net;
mod subnet;

pub use config::{count_for_layers, count_space, BackboneConfig, LayerInfo, ModelSpec, SearchSpaceCount};
pub use group::{group_forward, prepare_weight, BatchNormParams, GroupPlan, GroupVars, Precision};
pub use net::{Dropout, Forward, ForwardMode, Head, Stem, SuperGroup, SuperNet};
pub use subnet::{SubGroup, Subnet};
