use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{Baseline, EpochRecord, SearchState};
use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::objective::EvaluatedModel;
use crate::supernet::{BackboneConfig, SuperNet};
use crate::tensor::SgdState;
use crate::SearchRng;

pub const CHECKPOINT_VERSION: u32 = 1;
const KIND: &str = "checkpoint";

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: Vec<u8>,
    stream: u64,
    /// `u128` as a decimal string.
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    version: u32,
    seed: u64,
    epoch: usize,
    backbone: BackboneConfig,
    thresholds: Vec<[f64; 5]>,
    baseline: Baseline,
    rng: RngState,
    history: Vec<EpochRecord>,
    recent: Vec<EvaluatedModel>,
}

/// A saved search state: weights, thresholds, optimizer velocity, baseline,
/// RNG position and progress.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub state: SearchState,
}

impl Checkpoint {
    pub fn capture(state: &SearchState, seed: u64) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            seed,
            state: state.clone(),
        }
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let s = &self.state;
        let meta = Meta {
            version: self.version,
            seed: self.seed,
            epoch: s.epoch,
            backbone: s.net.config.clone(),
            thresholds: s.net.thresholds(),
            baseline: s.baseline,
            rng: RngState {
                seed: s.rng.get_seed().to_vec(),
                stream: s.rng.get_stream(),
                word_pos: s.rng.get_word_pos().to_string(),
            },
            history: s.history.clone(),
            recent: s.recent.clone(),
        };
        let mut a = Archive::new(KIND, serde_json::to_value(meta)?);
        let names = s.net.param_names();
        for (name, t) in names.iter().zip(s.net.params()) {
            a.push_tensor(name.clone(), t);
        }
        for (name, v) in names.iter().zip(&s.velocity.velocity) {
            a.push_tensor(format!("velocity.{name}"), v);
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let meta: Meta = serde_json::from_value(a.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {} not supported (expected {CHECKPOINT_VERSION})",
                meta.version
            )));
        }
        // Build a skeleton of the right shape, then overwrite every tensor.
        let mut net = SuperNet::<f32>::build(&meta.backbone, &mut SearchRng::seed_from_u64(0))?;
        if meta.thresholds.len() != net.groups.len() {
            return Err(Error::Checkpoint(format!(
                "{} threshold rows for {} layers",
                meta.thresholds.len(),
                net.groups.len()
            )));
        }
        let names = net.param_names();
        let mut velocity = Vec::with_capacity(names.len());
        for (name, p) in names.iter().zip(net.params_mut()) {
            let t = a.tensor(name)?;
            let v = a.tensor(&format!("velocity.{name}"))?;
            if t.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, backbone expects {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
            *p = t;
            velocity.push(v);
        }
        for (g, t) in net.groups.iter_mut().zip(&meta.thresholds) {
            g.kernel.set_thresholds(*t);
        }
        let seed: [u8; 32] = meta
            .rng
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let mut rng = SearchRng::from_seed(seed);
        rng.set_stream(meta.rng.stream);
        rng.set_word_pos(
            meta.rng
                .word_pos
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad rng word position `{}`", meta.rng.word_pos)))?,
        );
        Ok(Checkpoint {
            version: meta.version,
            seed: meta.seed,
            state: SearchState {
                net,
                velocity: SgdState { velocity },
                baseline: meta.baseline,
                rng,
                epoch: meta.epoch,
                history: meta.history,
                recent: meta.recent,
            },
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_archive()?.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_archive(&Archive::from_bytes(bytes, KIND)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
