//! The alternating search: momentum SGD on the supernet weights, REINFORCE
//! on the decision thresholds, then determinization and retraining of the
//! chosen subnet. Also lifelong warm-starting from a checkpoint.

mod checkpoint;
mod reinforce;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use reinforce::{policy_gradient, Baseline};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::objective::{self, EvaluatedModel, LatencyTable, RewardConfig};
use crate::superkernel::{self, DecisionProbabilities};
use crate::supernet::{BackboneConfig, Dropout, ForwardMode, ModelSpec, SuperNet, Subnet};
use crate::tensor::{sgd_step, Sgd, SgdConfig, SgdState, Tape};
use crate::SearchRng;

/// Hyperparameters of one search run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub max_epochs: usize,
    /// Models sampled per threshold update.
    pub samples_per_update: usize,
    /// Epochs with subset dropout active.
    pub warmup_epochs: usize,
    pub dropout_rate: f64,
    pub threshold_lr: f64,
    pub baseline_decay: f64,
    /// Subtract the moving-average baseline from rewards.
    pub use_baseline: bool,
    pub batch_size: usize,
    /// Validation batches drawn per threshold update.
    pub eval_batches: usize,
    /// Retraining epochs after determinization; `None` means `3 * max_epochs`.
    pub retrain_epochs: Option<usize>,
    /// Start retraining from the extracted supernet weights (otherwise a
    /// fresh initialization).
    pub inherit_weights: bool,
    /// Number of most recently sampled models kept in the result.
    pub last_k: usize,
    pub sgd: SgdConfig,
    pub rng_seed: u64,
    /// Validation accuracy for the epochs-to-target measure.
    pub target_accuracy: Option<f64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            max_epochs: 100,
            samples_per_update: 8,
            warmup_epochs: 20,
            dropout_rate: 0.1,
            threshold_lr: 0.05,
            baseline_decay: 0.9,
            use_baseline: true,
            batch_size: 256,
            eval_batches: 8,
            retrain_epochs: None,
            inherit_weights: true,
            last_k: 10,
            sgd: SgdConfig::default(),
            rng_seed: 0,
            target_accuracy: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.samples_per_update == 0 {
            return fail("samples_per_update must be >= 1".into());
        }
        if self.warmup_epochs > self.max_epochs {
            return fail(format!(
                "warmup_epochs {} exceeds max_epochs {}",
                self.warmup_epochs, self.max_epochs
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(self.threshold_lr > 0.0 && self.threshold_lr.is_finite()) {
            return fail(format!("threshold_lr must be positive, got {}", self.threshold_lr));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return fail(format!("baseline_decay {} outside [0, 1)", self.baseline_decay));
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be >= 2 for batch statistics, got {}", self.batch_size));
        }
        if self.eval_batches == 0 {
            return fail("eval_batches must be >= 1".into());
        }
        if let Some(t) = self.target_accuracy {
            if !(0.0..=1.0).contains(&t) {
                return fail(format!("target_accuracy {t} outside [0, 1]"));
            }
        }
        self.sgd.validate()
    }

    pub fn retrain_epochs(&self) -> usize {
        self.retrain_epochs.unwrap_or(3 * self.max_epochs)
    }
}

/// Training and validation halves.
#[derive(Clone, Debug)]
pub struct SearchData {
    pub train: Dataset,
    pub val: Dataset,
}

impl SearchData {
    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        for (name, d) in [("train", &self.train), ("val", &self.val)] {
            if d.is_empty() {
                return Err(Error::Data(format!("{name} split is empty")));
            }
            if d.channels != backbone.in_channels || d.resolution != backbone.input_resolution {
                return Err(Error::Data(format!(
                    "{name} images are {}x{}x{}, backbone expects {}x{}x{}",
                    d.channels,
                    d.resolution,
                    d.resolution,
                    backbone.in_channels,
                    backbone.input_resolution,
                    backbone.input_resolution
                )));
            }
            if d.num_classes != backbone.num_classes {
                return Err(Error::Data(format!(
                    "{name} has {} classes, backbone head has {}",
                    d.num_classes, backbone.num_classes
                )));
            }
        }
        Ok(())
    }
}

/// Everything the reward needs besides the network.
#[derive(Clone, Debug)]
pub struct Objective {
    pub reward: RewardConfig,
    pub latency: LatencyTable,
}

/// One row of the search curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy of the determinized spec on the full validation split.
    pub val_accuracy: f64,
    /// Exact expectation under the current decision probabilities.
    pub expected_latency: f64,
    pub reward: f64,
    /// Mean reward of the sampled models.
    pub sample_reward: f64,
}

/// Mutable search state, everything a checkpoint captures.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchState {
    pub net: SuperNet<f32>,
    pub velocity: SgdState<f32>,
    pub baseline: Baseline,
    pub rng: SearchRng,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub recent: Vec<EvaluatedModel>,
}

impl SearchState {
    /// Fresh state: He-initialized weights, every decision at probability 0.5.
    pub fn fresh(backbone: &BackboneConfig, cfg: &SearchConfig) -> Result<Self> {
        let mut rng = SearchRng::seed_from_u64(cfg.rng_seed);
        let net = SuperNet::build(backbone, &mut rng)?;
        Ok(Self::around(net, rng))
    }

    fn around(net: SuperNet<f32>, rng: SearchRng) -> Self {
        let velocity = SgdState::zeros_like(&net.params());
        SearchState {
            net,
            velocity,
            baseline: Baseline::default(),
            rng,
            epoch: 0,
            history: Vec::new(),
            recent: Vec::new(),
        }
    }

    /// Warm start: weights and thresholds from the checkpoint, everything
    /// else reset. A differing class count re-initializes the head only.
    pub fn warm_start(ckpt: &Checkpoint, backbone: &BackboneConfig, cfg: &SearchConfig) -> Result<Self> {
        let diff = ckpt.state.net.config.structural_diff(backbone);
        if !diff.is_empty() {
            return Err(Error::Structure(diff));
        }
        let mut rng = SearchRng::seed_from_u64(cfg.rng_seed);
        let mut net = ckpt.state.net.clone();
        if backbone.num_classes != net.config.num_classes {
            net.reset_head(backbone.num_classes, &mut rng);
        }
        Ok(Self::around(net, rng))
    }

    /// Either a fresh state or a warm start.
    pub fn initialize(backbone: &BackboneConfig, cfg: &SearchConfig, ckpt: Option<&Checkpoint>) -> Result<Self> {
        backbone.validate()?;
        match ckpt {
            None => Self::fresh(backbone, cfg),
            Some(c) => Self::warm_start(c, backbone, cfg),
        }
    }

    pub fn probabilities(&self) -> Vec<DecisionProbabilities> {
        self.net
            .groups
            .iter()
            .map(|g| g.kernel.decision_probabilities(false))
            .collect()
    }

    /// One soft-mode SGD step on `batch`; thresholds are not touched.
    /// Returns the batch loss.
    pub fn weight_step(&mut self, batch: &Batch, cfg: &SearchConfig, dropout: bool) -> Result<f64> {
        let mut tape = Tape::new();
        let dropout = dropout.then(|| Dropout {
            rate: cfg.dropout_rate,
            rng: &mut self.rng,
        });
        let fwd = self
            .net
            .forward(&mut tape, &batch.images, ForwardMode::Soft, dropout, true)?;
        let loss = tape.softmax_cross_entropy(fwd.logits, &batch.labels)?;
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {value} at epoch {} (batch of {}); lower the learning rate",
                self.epoch,
                batch.len()
            )));
        }
        let grads = tape.backward(loss)?;
        let g: Vec<_> = fwd.params.iter().map(|&v| grads.get(v)).collect();
        let decay = self.net.decay_flags();
        sgd_step(&mut self.net.params_mut(), &g, &decay, &mut self.velocity, &cfg.sgd)?;
        Ok(value)
    }

    /// Samples `N` specs, scores them on a random validation subset and moves
    /// the thresholds along the policy gradient. Weights are not touched.
    pub fn threshold_step(
        &mut self,
        val: &Dataset,
        objective: &Objective,
        cfg: &SearchConfig,
    ) -> Result<Vec<EvaluatedModel>> {
        let probs = self.probabilities();
        let skip: Vec<bool> = self.net.groups.iter().map(|g| g.kernel.skip_allowed).collect();
        let specs: Vec<ModelSpec> = (0..cfg.samples_per_update)
            .map(|_| {
                let (arch, quant) = probs
                    .iter()
                    .zip(&skip)
                    .map(|(p, &s)| superkernel::sample_outcome(p, s, &mut self.rng))
                    .unzip();
                ModelSpec { arch, quant }
            })
            .collect();
        let batches = eval_subset(val, cfg, &mut self.rng);

        let net = &self.net;
        let accuracies = specs
            .par_iter()
            .map(|s| objective::evaluate_accuracy(net, s, &batches))
            .collect::<Result<Vec<f64>>>()?;
        let models = specs
            .into_iter()
            .zip(accuracies)
            .map(|(s, acc)| {
                let lat = objective::estimate_latency(&s, &objective.latency)?;
                Ok(EvaluatedModel::new(s, acc, lat, &objective.reward))
            })
            .collect::<Result<Vec<_>>>()?;

        let rewards: Vec<f64> = models.iter().map(|m| m.reward).collect();
        let b = if cfg.use_baseline {
            self.baseline.value_or_mean(&rewards)
        } else {
            0.0
        };
        let steps = policy_gradient(&probs, &skip, &models, b, cfg.threshold_lr);
        for (g, s) in self.net.groups.iter_mut().zip(&steps) {
            g.kernel.apply_threshold_step(s);
        }
        if cfg.use_baseline {
            self.baseline.update(&rewards, cfg.baseline_decay);
        }
        self.recent.extend(models.iter().cloned());
        let excess = self.recent.len().saturating_sub(cfg.last_k);
        self.recent.drain(..excess);
        Ok(models)
    }

    /// Runs epochs until `self.epoch == until`.
    pub fn run_epochs(&mut self, data: &SearchData, objective: &Objective, cfg: &SearchConfig, until: usize) -> Result<()> {
        while self.epoch < until {
            let warm = self.epoch < cfg.warmup_epochs && cfg.dropout_rate > 0.0;
            let batches = data.train.shuffled_batches(cfg.batch_size, &mut self.rng);
            let mut loss = 0.0;
            for b in &batches {
                loss += self.weight_step(b, cfg, warm)?;
            }
            let sampled = self.threshold_step(&data.val, objective, cfg)?;
            let record = self.record(data, objective, cfg, loss / batches.len().max(1) as f64, &sampled)?;
            self.history.push(record);
            self.epoch += 1;
        }
        Ok(())
    }

    fn record(
        &self,
        data: &SearchData,
        objective: &Objective,
        cfg: &SearchConfig,
        train_loss: f64,
        sampled: &[EvaluatedModel],
    ) -> Result<EpochRecord> {
        let spec = self.net.determinize();
        let val_accuracy = objective::evaluate_accuracy(&self.net, &spec, &data.val.batches(cfg.batch_size))?;
        let expected_latency = objective::expected_latency(&self.probabilities(), &objective.latency);
        Ok(EpochRecord {
            epoch: self.epoch,
            train_loss,
            val_accuracy,
            expected_latency,
            reward: objective::reward(val_accuracy, expected_latency, &objective.reward),
            sample_reward: sampled.iter().map(|m| m.reward).sum::<f64>() / sampled.len() as f64,
        })
    }
}

/// Random validation batches for one threshold update. With fewer images
/// than requested the whole split is used.
fn eval_subset(val: &Dataset, cfg: &SearchConfig, rng: &mut SearchRng) -> Vec<Batch> {
    let want = cfg.eval_batches * cfg.batch_size;
    let mut idx: Vec<usize> = (0..val.len()).collect();
    if want < val.len() {
        idx.shuffle(rng);
        idx.truncate(want);
    }
    idx.chunks(cfg.batch_size).map(|c| val.batch(c)).collect()
}

/// Change of one layer's depthwise weights between two snapshots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDrift {
    pub layer: usize,
    pub mean_abs_change: f64,
    pub rms: f64,
    /// `mean_abs_change / rms`.
    pub ratio: f64,
}

pub fn weight_drift(before: &SuperNet<f32>, after: &SuperNet<f32>) -> Vec<LayerDrift> {
    before
        .groups
        .iter()
        .zip(&after.groups)
        .enumerate()
        .map(|(layer, (a, b))| {
            let (wa, wb) = (a.kernel.weights.data(), b.kernel.weights.data());
            let n = wa.len() as f64;
            let mean_abs_change = wa.iter().zip(wb).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / n;
            let rms = (wa.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / n).sqrt();
            LayerDrift {
                layer,
                mean_abs_change,
                rms,
                ratio: if rms > 0.0 { mean_abs_change / rms } else { 0.0 },
            }
        })
        .collect()
}

/// First epoch count (1-based) after which validation accuracy reached
/// `target`.
pub fn epochs_to_target(history: &[EpochRecord], target: f64) -> Option<usize> {
    history.iter().position(|r| r.val_accuracy >= target).map(|i| i + 1)
}

/// Lifelong-evolution measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolveReport {
    pub source_classes: usize,
    pub target_classes: usize,
    pub target_accuracy: Option<f64>,
    pub epochs_to_target: Option<usize>,
    pub drift: Vec<LayerDrift>,
    /// Layer whose drift is the headline number.
    pub middle_layer: usize,
}

/// Output of a search run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub spec: ModelSpec,
    pub history: Vec<EpochRecord>,
    /// Most recently sampled models.
    pub recent: Vec<EvaluatedModel>,
    pub final_accuracy: f64,
    pub final_latency_ms: f64,
    pub model_size_bytes: f64,
    /// Mean loss per retraining epoch.
    pub retrain_loss: Vec<f64>,
    pub epochs_to_target: Option<usize>,
    pub evolve: Option<EvolveReport>,
    /// The retrained network.
    #[serde(skip)]
    pub subnet: Option<Subnet<f32>>,
}

impl SearchResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Data(format!("corrupt search result: {e}")))
    }
}

/// Result plus the supernet checkpoint taken right after the search loop.
#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub result: SearchResult,
    pub checkpoint: Checkpoint,
}

/// Retrains an extracted subnet with quantization-aware forward passes and
/// a fresh optimizer. Returns the mean loss of each epoch.
pub fn retrain(subnet: &mut Subnet<f32>, train: &Dataset, cfg: &SearchConfig, rng: &mut SearchRng) -> Result<Vec<f64>> {
    let mut sgd = Sgd::new(cfg.sgd, &subnet.params());
    let decay = subnet.decay_flags();
    let mut losses = Vec::with_capacity(cfg.retrain_epochs());
    for epoch in 0..cfg.retrain_epochs() {
        let batches = train.shuffled_batches(cfg.batch_size, rng);
        let mut total = 0.0;
        for b in &batches {
            let mut tape = Tape::new();
            let (logits, params) = subnet.forward(&mut tape, &b.images, true, true)?;
            let loss = tape.softmax_cross_entropy(logits, &b.labels)?;
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("retraining loss {value} at epoch {epoch}")));
            }
            let grads = tape.backward(loss)?;
            let g: Vec<_> = params.iter().map(|&v| grads.get(v)).collect();
            sgd.step(&mut subnet.params_mut(), &g, &decay)?;
            total += value;
        }
        losses.push(total / batches.len().max(1) as f64);
    }
    Ok(losses)
}

/// Determinizes, extracts and retrains the final subnet.
pub fn finalize(state: &mut SearchState, data: &SearchData, objective: &Objective, cfg: &SearchConfig) -> Result<SearchResult> {
    let spec = state.net.determinize();
    let subnet = if cfg.inherit_weights {
        state.net.extract_subnet(&spec)?
    } else {
        SuperNet::build(&state.net.config, &mut state.rng)?.extract_subnet(&spec)?
    };
    let mut subnet = subnet;
    let retrain_loss = retrain(&mut subnet, &data.train, cfg, &mut state.rng)?;
    let final_accuracy = objective::evaluate_subnet_accuracy(&subnet, &data.val.batches(cfg.batch_size))?;
    Ok(SearchResult {
        final_latency_ms: objective::estimate_latency(&spec, &objective.latency)?,
        model_size_bytes: subnet.size_bits() as f64 / 8.0,
        epochs_to_target: cfg.target_accuracy.and_then(|t| epochs_to_target(&state.history, t)),
        spec,
        history: state.history.clone(),
        recent: state.recent.clone(),
        final_accuracy,
        retrain_loss,
        evolve: None,
        subnet: Some(subnet),
    })
}

fn check_inputs(backbone: &BackboneConfig, data: &SearchData, objective: &Objective, cfg: &SearchConfig) -> Result<()> {
    cfg.validate()?;
    backbone.validate()?;
    objective.reward.validate()?;
    objective.latency.validate()?;
    if objective.latency.num_layers != backbone.num_layers() {
        return Err(Error::Config(format!(
            "latency table covers {} layers, backbone has {}",
            objective.latency.num_layers,
            backbone.num_layers()
        )));
    }
    data.validate(backbone)
}

/// The whole search: initialize (optionally from a checkpoint), run
/// `max_epochs`, checkpoint, then finalize.
pub fn run_search(
    backbone: &BackboneConfig,
    data: &SearchData,
    objective: &Objective,
    cfg: &SearchConfig,
    ckpt: Option<&Checkpoint>,
) -> Result<SearchOutcome> {
    check_inputs(backbone, data, objective, cfg)?;
    let mut state = SearchState::initialize(backbone, cfg, ckpt)?;
    state.run_epochs(data, objective, cfg, cfg.max_epochs)?;
    let checkpoint = Checkpoint::capture(&state, cfg.rng_seed);
    let result = finalize(&mut state, data, objective, cfg)?;
    Ok(SearchOutcome { result, checkpoint })
}

/// Continues an interrupted search from a checkpoint taken mid-run.
pub fn resume_search(ckpt: &Checkpoint, data: &SearchData, objective: &Objective, cfg: &SearchConfig) -> Result<SearchOutcome> {
    let backbone = ckpt.state.net.config.clone();
    check_inputs(&backbone, data, objective, cfg)?;
    let mut state = ckpt.state.clone();
    state.run_epochs(data, objective, cfg, cfg.max_epochs)?;
    let checkpoint = Checkpoint::capture(&state, cfg.rng_seed);
    let result = finalize(&mut state, data, objective, cfg)?;
    Ok(SearchOutcome { result, checkpoint })
}

/// Warm-started search on new data; also measures epochs to the target
/// accuracy and how far the depthwise weights moved.
pub fn evolve(
    ckpt: &Checkpoint,
    backbone: &BackboneConfig,
    data: &SearchData,
    objective: &Objective,
    cfg: &SearchConfig,
) -> Result<SearchOutcome> {
    let mut out = run_search(backbone, data, objective, cfg, Some(ckpt))?;
    let drift = weight_drift(&ckpt.state.net, &out.checkpoint.state.net);
    out.result.evolve = Some(EvolveReport {
        source_classes: ckpt.state.net.config.num_classes,
        target_classes: backbone.num_classes,
        target_accuracy: cfg.target_accuracy,
        epochs_to_target: out.result.epochs_to_target,
        middle_layer: drift.len() / 2,
        drift,
    });
    Ok(out)
}
