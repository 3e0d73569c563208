//! The latency/accuracy reward, latency lookup tables, accuracy evaluation
//! and Pareto-front bookkeeping.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::quantizer::Bits;
use crate::superkernel::{ArchDecision, DecisionProbabilities};
use crate::supernet::{BackboneConfig, LayerInfo, ModelSpec, SuperNet, Subnet};

/// Weights and thresholds of the reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub mu: f64,
    pub nu: f64,
    /// Milliseconds.
    pub lat_threshold: f64,
    /// Fraction in `[0,1]`.
    pub acc_threshold: f64,
    #[serde(default = "default_over_slope")]
    pub over_slope: f64,
    /// Defaults to `lat_threshold`.
    #[serde(default)]
    pub latency_normalizer: Option<f64>,
}

fn default_over_slope() -> f64 {
    0.5
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            mu: 0.5,
            nu: 0.5,
            lat_threshold: 1.0,
            acc_threshold: 0.8,
            over_slope: 0.5,
            latency_normalizer: None,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.mu) || !(0.0..=1.0).contains(&self.nu) {
            return fail(format!("mu={} and nu={} must lie in [0, 1]", self.mu, self.nu));
        }
        if (self.mu + self.nu - 1.0).abs() > 1e-9 {
            return fail(format!("mu + nu must equal 1, got {} + {} = {}", self.mu, self.nu, self.mu + self.nu));
        }
        if !(self.lat_threshold > 0.0 && self.lat_threshold.is_finite()) {
            return fail(format!("lat_threshold must be positive, got {}", self.lat_threshold));
        }
        if !(0.0..=1.0).contains(&self.acc_threshold) {
            return fail(format!("acc_threshold {} outside [0, 1]", self.acc_threshold));
        }
        if !self.over_slope.is_finite() || self.over_slope < 0.0 {
            return fail(format!("over_slope must be finite and >= 0, got {}", self.over_slope));
        }
        if let Some(n) = self.latency_normalizer {
            if !(n > 0.0 && n.is_finite()) {
                return fail(format!("latency_normalizer must be positive, got {n}"));
            }
        }
        Ok(())
    }

    pub fn normalizer(&self) -> f64 {
        self.latency_normalizer.unwrap_or(self.lat_threshold)
    }
}

/// Leaky-ReLU-shaped latency term, unit slope below the threshold and
/// `over_slope` at or above it. Not yet normalized.
pub fn soften_latency(lat: f64, cfg: &RewardConfig) -> f64 {
    let d = lat - cfg.lat_threshold;
    if lat < cfg.lat_threshold {
        d
    } else {
        cfg.over_slope * d
    }
}

/// Accuracy counterpart: full slope on a deficit, `over_slope` above the
/// threshold.
pub fn soften_accuracy(acc: f64, cfg: &RewardConfig) -> f64 {
    let d = acc - cfg.acc_threshold;
    if acc < cfg.acc_threshold {
        d
    } else {
        cfg.over_slope * d
    }
}

/// `-mu * soften_latency / normalizer + nu * soften_accuracy`.
pub fn reward(acc: f64, lat: f64, cfg: &RewardConfig) -> f64 {
    -cfg.mu * soften_latency(lat, cfg) / cfg.normalizer() + cfg.nu * soften_accuracy(acc, cfg)
}

/// A spec with its measured accuracy, latency and reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedModel {
    pub spec: ModelSpec,
    pub accuracy: f64,
    pub latency_ms: f64,
    pub reward: f64,
}

impl EvaluatedModel {
    pub fn new(spec: ModelSpec, accuracy: f64, latency_ms: f64, cfg: &RewardConfig) -> Self {
        EvaluatedModel {
            reward: reward(accuracy, latency_ms, cfg),
            spec,
            accuracy,
            latency_ms,
        }
    }

    /// `self` is at least as good on both axes and strictly better on one.
    pub fn dominates(&self, other: &EvaluatedModel) -> bool {
        self.accuracy >= other.accuracy
            && self.latency_ms <= other.latency_ms
            && (self.accuracy > other.accuracy || self.latency_ms < other.latency_ms)
    }
}

/// Per-model flag: true when no other model dominates it.
pub fn non_dominated_flags(models: &[EvaluatedModel]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..models.len()).collect();
    order.sort_by(|&a, &b| {
        let (ma, mb) = (&models[a], &models[b]);
        ma.latency_ms
            .total_cmp(&mb.latency_ms)
            .then(mb.accuracy.total_cmp(&ma.accuracy))
    });
    let mut flags = vec![false; models.len()];
    let mut best: Option<(f64, f64)> = None;
    for i in order {
        let m = &models[i];
        let keep = match best {
            None => true,
            Some((acc, lat)) => m.accuracy > acc || (m.accuracy == acc && m.latency_ms == lat),
        };
        if keep {
            flags[i] = true;
            if best.is_none_or(|(acc, _)| m.accuracy > acc) {
                best = Some((m.accuracy, m.latency_ms));
            }
        }
    }
    flags
}

/// The non-dominated subset (maximize accuracy, minimize latency), ordered
/// by latency ascending; ties keep input order.
pub fn pareto_front(models: &[EvaluatedModel]) -> Vec<EvaluatedModel> {
    let flags = non_dominated_flags(models);
    let mut front: Vec<&EvaluatedModel> = models.iter().zip(&flags).filter(|(_, &f)| f).map(|(m, _)| m).collect();
    front.sort_by(|a, b| a.latency_ms.total_cmp(&b.latency_ms));
    front.into_iter().cloned().collect()
}

/// Key of one latency entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LatencyKey {
    pub layer: usize,
    pub kernel: u8,
    pub expand: u8,
    pub bits: Bits,
}

impl std::fmt::Display for LatencyKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "(layer={}, kernel={}, expand={}, bits={})",
            self.layer, self.kernel, self.expand, self.bits
        )
    }
}

/// Every key a table for `layers` layers must contain: both kernels, all
/// three expansions (0 = skip) and all three precisions per layer.
pub fn required_keys(layers: usize) -> Vec<LatencyKey> {
    let mut keys = Vec::with_capacity(layers * 18);
    for layer in 0..layers {
        for kernel in [3u8, 5] {
            for expand in [0u8, 3, 6] {
                for bits in Bits::ALL {
                    keys.push(LatencyKey {
                        layer,
                        kernel,
                        expand,
                        bits,
                    });
                }
            }
        }
    }
    keys
}

/// Per-layer latency lookup with a fixed overhead, in milliseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyTable {
    pub entries: BTreeMap<LatencyKey, f64>,
    pub overhead_ms: f64,
    pub num_layers: usize,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    layer: String,
    kernel: Option<u8>,
    expand: Option<u8>,
    bits: Option<u32>,
    latency_ms: f64,
}

impl LatencyTable {
    /// Checks full key coverage, non-negative values and zero skip entries.
    /// All missing keys are listed.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.overhead_ms >= 0.0 && self.overhead_ms.is_finite()) {
            problems.push(format!("overhead {} must be finite and >= 0", self.overhead_ms));
        }
        for key in required_keys(self.num_layers) {
            match self.entries.get(&key) {
                None => problems.push(format!("missing key {key}")),
                Some(&v) if !(v >= 0.0 && v.is_finite()) => {
                    problems.push(format!("latency {v} at {key} must be finite and >= 0"))
                }
                Some(&v) if key.expand == 0 && v != 0.0 => {
                    problems.push(format!("skip entry {key} must be 0, got {v}"))
                }
                _ => {}
            }
        }
        for key in self.entries.keys() {
            if key.layer >= self.num_layers {
                problems.push(format!("unexpected key {key} beyond {} layers", self.num_layers));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Data(format!("latency table invalid: {}", problems.join("; "))))
        }
    }

    pub fn entry(&self, layer: usize, arch: ArchDecision, bits: Bits) -> f64 {
        if arch.is_skip() {
            return 0.0;
        }
        self.entries[&LatencyKey {
            layer,
            kernel: arch.kernel,
            expand: arch.expand,
            bits,
        }]
    }

    /// Parses CSV with header `layer,kernel,expand,bits,latency_ms` and one
    /// `overhead,,,,<ms>` row, then validates against `num_layers`.
    pub fn from_csv<R: Read>(reader: R, num_layers: usize) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers()?.clone();
        let expected = ["layer", "kernel", "expand", "bits", "latency_ms"];
        if header.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Data(format!(
                "latency table header {:?}, expected {}",
                header.iter().collect::<Vec<_>>(),
                expected.join(",")
            )));
        }
        let mut entries = BTreeMap::new();
        let mut overhead = None;
        for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
            let row = row?;
            let line = i + 2;
            if row.layer == "overhead" {
                if overhead.replace(row.latency_ms).is_some() {
                    return Err(Error::Data(format!("line {line}: duplicate overhead row")));
                }
                continue;
            }
            let layer: usize = row
                .layer
                .parse()
                .map_err(|_| Error::Data(format!("line {line}: bad layer `{}`", row.layer)))?;
            let (Some(kernel), Some(expand), Some(bits)) = (row.kernel, row.expand, row.bits) else {
                return Err(Error::Data(format!("line {line}: kernel, expand and bits are required")));
            };
            let bits = Bits::try_from(bits).map_err(|e| Error::Data(format!("line {line}: {e}")))?;
            if !matches!(kernel, 3 | 5) || !matches!(expand, 0 | 3 | 6) {
                return Err(Error::Data(format!(
                    "line {line}: kernel {kernel} / expand {expand} outside {{3,5}} x {{0,3,6}}"
                )));
            }
            let key = LatencyKey {
                layer,
                kernel,
                expand,
                bits,
            };
            if entries.insert(key, row.latency_ms).is_some() {
                return Err(Error::Data(format!("line {line}: duplicate key {key}")));
            }
        }
        let overhead_ms = overhead.ok_or_else(|| Error::Data("latency table has no overhead row".into()))?;
        let table = LatencyTable {
            entries,
            overhead_ms,
            num_layers,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: &Path, num_layers: usize) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot open latency table {}: {e}", path.display())))?;
        Self::from_csv(f, num_layers)
    }

    pub fn to_csv<W: Write>(&self, writer: W) -> Result<()> {
        // The header comes from the row struct's field names.
        let mut w = csv::Writer::from_writer(writer);
        for (k, v) in &self.entries {
            w.serialize(CsvRow {
                layer: k.layer.to_string(),
                kernel: Some(k.kernel),
                expand: Some(k.expand),
                bits: Some(k.bits.count()),
                latency_ms: *v,
            })?;
        }
        w.serialize(CsvRow {
            layer: "overhead".into(),
            kernel: None,
            expand: None,
            bits: None,
            latency_ms: self.overhead_ms,
        })?;
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_csv(std::fs::File::create(path)?)
    }
}

/// Overhead plus the per-layer entries; skipped layers contribute 0.
pub fn estimate_latency(spec: &ModelSpec, table: &LatencyTable) -> Result<f64> {
    if spec.len() != table.num_layers {
        return Err(Error::InvalidArgument(format!(
            "spec has {} layers, latency table {}",
            spec.len(),
            table.num_layers
        )));
    }
    Ok(table.overhead_ms
        + spec
            .arch
            .iter()
            .zip(&spec.quant)
            .enumerate()
            .map(|(i, (&a, &b))| table.entry(i, a, b))
            .sum::<f64>())
}

/// Exact expected latency when each layer's decisions are drawn from
/// `probs`. Skips cost nothing, so only the four kept options contribute.
pub fn expected_latency(probs: &[DecisionProbabilities], table: &LatencyTable) -> f64 {
    let mut total = table.overhead_ms;
    for (layer, p) in probs.iter().enumerate() {
        for arch in ArchDecision::options() {
            for bits in Bits::ALL {
                let pr = p.probability(arch, bits);
                if pr > 0.0 {
                    total += pr * table.entry(layer, arch, bits);
                }
            }
        }
    }
    total
}

/// Multipliers applied to 16-bit latency for each precision.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitFactors {
    pub b4: f64,
    pub b8: f64,
    pub b16: f64,
}

impl Default for BitFactors {
    fn default() -> Self {
        BitFactors {
            b4: 0.55,
            b8: 0.7,
            b16: 1.0,
        }
    }
}

impl BitFactors {
    pub fn get(&self, bits: Bits) -> f64 {
        match bits {
            Bits::B4 => self.b4,
            Bits::B8 => self.b8,
            Bits::B16 => self.b16,
        }
    }
}

/// Analytic table: `MACs / 1e6 * coeff * bit_factor`, plus `overhead_ms`.
pub fn synth_latency_table(
    cfg: &BackboneConfig,
    coeff_ms_per_mmac: f64,
    factors: &BitFactors,
    overhead_ms: f64,
) -> Result<LatencyTable> {
    if !(coeff_ms_per_mmac > 0.0 && coeff_ms_per_mmac.is_finite()) {
        return Err(Error::Config(format!("latency coefficient must be positive, got {coeff_ms_per_mmac}")));
    }
    let layers = cfg.layers()?;
    Ok(synth_for_layers(&layers, coeff_ms_per_mmac, factors, overhead_ms))
}

fn synth_for_layers(layers: &[LayerInfo], coeff: f64, factors: &BitFactors, overhead_ms: f64) -> LatencyTable {
    let mut entries = BTreeMap::new();
    for key in required_keys(layers.len()) {
        let arch = ArchDecision {
            kernel: key.kernel,
            expand: key.expand,
        };
        let macs = layers[key.layer].macs(arch) as f64;
        entries.insert(key, macs / 1e6 * coeff * factors.get(key.bits));
    }
    LatencyTable {
        entries,
        overhead_ms,
        num_layers: layers.len(),
    }
}

fn count_correct(predictions: &[usize], labels: &[usize]) -> usize {
    predictions.iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Top-1 accuracy of the supernet under `spec` (quantized, batch-norm on
/// each batch's statistics). Batches are evaluated in parallel.
pub fn evaluate_accuracy(net: &SuperNet<f32>, spec: &ModelSpec, batches: &[Batch]) -> Result<f64> {
    accuracy_over(batches, |b| net.predict(&b.images, spec))
}

/// Top-1 accuracy of an extracted subnet.
pub fn evaluate_subnet_accuracy(subnet: &Subnet<f32>, batches: &[Batch]) -> Result<f64> {
    accuracy_over(batches, |b| subnet.predict(&b.images))
}

fn accuracy_over<F>(batches: &[Batch], predict: F) -> Result<f64>
where
    F: Fn(&Batch) -> Result<Vec<usize>> + Sync,
{
    let total: usize = batches.iter().map(Batch::len).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("accuracy over an empty validation set".into()));
    }
    let correct = batches
        .par_iter()
        .map(|b| Ok(count_correct(&predict(b)?, &b.labels)))
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mu: f64) -> RewardConfig {
        RewardConfig {
            mu,
            nu: 1.0 - mu,
            lat_threshold: 20.0,
            acc_threshold: 0.5,
            over_slope: 0.5,
            latency_normalizer: None,
        }
    }

    #[test]
    fn soften_examples() {
        let c = cfg(0.2);
        assert_eq!(soften_latency(20.0, &c), 0.0);
        assert_eq!(soften_latency(10.0, &c), -10.0);
        assert_eq!(soften_latency(10.0, &c) / c.normalizer(), -0.5);
        assert_eq!(soften_latency(30.0, &c), 5.0);
        assert_eq!(soften_accuracy(0.5, &c), 0.0);
        assert!((soften_accuracy(0.4, &c) + 0.1).abs() < 1e-12);
        assert!((soften_accuracy(0.6, &c) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn reward_examples() {
        let c = cfg(0.2);
        assert_eq!(reward(0.5, 20.0, &c), 0.0);
        assert!((reward(0.5, 10.0, &c) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn mu_nu_must_sum_to_one() {
        let mut c = cfg(0.2);
        c.mu = 1.0;
        assert!(c.validate().is_err());
        c.nu = 0.0;
        assert!(c.validate().is_ok());
    }

    fn model(acc: f64, lat: f64) -> EvaluatedModel {
        EvaluatedModel {
            spec: ModelSpec::uniform(1, ArchDecision::MAX, Bits::B16),
            accuracy: acc,
            latency_ms: lat,
            reward: 0.0,
        }
    }

    #[test]
    fn pareto_examples() {
        let both = pareto_front(&[model(0.8, 20.0), model(0.9, 10.0)]);
        assert_eq!(both.len(), 1);
        let both = pareto_front(&[model(0.9, 10.0), model(0.8, 20.0)]);
        assert_eq!(both.len(), 1);
        let keep = pareto_front(&[model(0.8, 20.0), model(0.9, 30.0)]);
        assert_eq!(keep.len(), 2);
        assert_eq!(keep[0].latency_ms, 20.0);
        let one = pareto_front(&[model(0.9, 10.0), model(0.8, 10.0)]);
        assert_eq!(one, vec![model(0.9, 10.0)]);
        let dup = pareto_front(&[model(0.9, 10.0), model(0.9, 10.0)]);
        assert_eq!(dup.len(), 2);
    }

    #[test]
    fn single_layer_table_sum() {
        let mut t = synth_latency_table(&BackboneConfig::minimal(2), 1.0, &BitFactors::default(), 0.5).unwrap();
        let key = LatencyKey {
            layer: 0,
            kernel: 3,
            expand: 3,
            bits: Bits::B4,
        };
        t.entries.insert(key, 1.0);
        let mut spec = ModelSpec::uniform(3, ArchDecision { kernel: 3, expand: 3 }, Bits::B4);
        spec.arch[1] = ArchDecision::MAX;
        let others = t.entry(1, ArchDecision::MAX, Bits::B4) + t.entry(2, spec.arch[2], Bits::B4);
        assert!((estimate_latency(&spec, &t).unwrap() - (1.5 + others)).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip_and_missing_key() {
        let t = synth_latency_table(&BackboneConfig::minimal(2), 2.0, &BitFactors::default(), 0.25).unwrap();
        let mut buf = Vec::new();
        t.to_csv(&mut buf).unwrap();
        let back = LatencyTable::from_csv(buf.as_slice(), 3).unwrap();
        assert_eq!(back, t);

        let text = String::from_utf8(buf).unwrap();
        let missing: String = text
            .lines()
            .filter(|l| !l.starts_with("1,5,6,8,"))
            .map(|l| format!("{l}\n"))
            .collect();
        let err = LatencyTable::from_csv(missing.as_bytes(), 3).unwrap_err().to_string();
        assert!(err.contains("missing key (layer=1, kernel=5, expand=6, bits=8)"), "{err}");

        let no_overhead: String = text
            .lines()
            .filter(|l| !l.starts_with("overhead"))
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(LatencyTable::from_csv(no_overhead.as_bytes(), 3).is_err());
    }
}
