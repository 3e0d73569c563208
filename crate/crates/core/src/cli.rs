//! Command implementations behind the `bitshare-nas` binary.
//!
//! Every command validates its whole configuration before doing any work and
//! refuses to write into a non-empty output directory (or over an existing
//! file) unless `--force` is given. Relative output paths are resolved
//! against `$BITSHARE_NAS_OUT` when it is set.
//!
//! A run configuration is a JSON file:
//!
//! ```json
//! {
//!   "backbone": { "num_blocks": 5, "groups_per_block": 4, "in_channels": 3,
//!                 "stem_channels": 4, "block_channels": [4, 8, 8, 12, 16],
//!                 "block_strides": [1, 2, 1, 2, 1], "num_classes": 4,
//!                 "input_resolution": 8 },
//!   "search": { "max_epochs": 30, "batch_size": 64, "threshold_lr": 5.0 },
//!   "reward": { "mu": 0.5, "nu": 0.5, "lat_threshold": 1.6, "acc_threshold": 0.9 },
//!   "dataset": { "kind": "synthetic",
//!                "synthetic": { "num_classes": 4, "samples": 6000, "resolution": 8,
//!                               "channels": 3, "noise": 1.0, "max_shift": 1,
//!                               "seed": 0, "prototype_seed": 7 },
//!                "split": { "fraction": 0.8333 } },
//!   "latency": { "kind": "synthetic", "coeff_ms_per_mmac": 10.0, "overhead_ms": 0.1 },
//!   "output_dir": "runs/toy"
//! }
//! ```
//!
//! Omitted `search` fields take their defaults. `dataset.path` points at an
//! archive written by `ingest`; `latency` may instead be
//! `{ "kind": "table", "path": "table.csv" }`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::data::{self, Dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::objective::{non_dominated_flags, synth_latency_table, BitFactors, LatencyTable, RewardConfig};
use crate::search::{self, Checkpoint, Objective, SearchConfig, SearchData, SearchOutcome, SearchResult};
use crate::supernet::BackboneConfig;

pub const OUTPUT_ROOT_ENV: &str = "BITSHARE_NAS_OUT";
pub const DATASET_KIND: &str = "dataset";

pub const CHECKPOINT_FILE: &str = "checkpoint.bsnas";
pub const RESULT_FILE: &str = "result.json";
pub const SUBNET_FILE: &str = "subnet.bsnas";
pub const CONFIG_FILE: &str = "config.json";
pub const EVOLVE_FILE: &str = "evolve.json";
pub const DRIFT_FILE: &str = "drift.csv";

/// Process exit code for an error: 2 configuration, 3 data, 4 runtime.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Structure(_) | Error::InvalidArgument(_) => 2,
        Error::Data(_) | Error::Checkpoint(_) => 3,
        Error::Shape { .. } | Error::NonFinite(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_) => 4,
    }
}

#[derive(Parser, Debug)]
#[command(name = "bitshare-nas", version, about = "Joint architecture and bit-width search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Decode and normalize a dataset into an archive.
    Ingest(IngestArgs),
    /// Run a search, then retrain the chosen subnet.
    Search(RunArgs),
    /// Warm-start a search from a checkpoint on new data or preferences.
    Evolve(EvolveArgs),
    /// Emit curves, Pareto data and the per-layer spec from a result file.
    Report(ReportArgs),
    /// Generate or validate a latency table.
    #[command(subcommand)]
    Latency(LatencyCommand),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Cifar10,
    Synthetic,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[arg(long, value_enum)]
    pub kind: DatasetKind,
    /// Directory with the CIFAR-10 binary batch files.
    #[arg(long, required_if_eq("kind", "cifar10"))]
    pub dir: Option<PathBuf>,
    /// Average-pooling factor applied after normalization.
    #[arg(long, default_value_t = 1)]
    pub downsample: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 1024)]
    pub samples: usize,
    #[arg(long, default_value_t = 8)]
    pub resolution: usize,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub nu: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct EvolveArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Accuracy whose first crossing is reported.
    #[arg(long)]
    pub target_accuracy: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub result: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
pub enum LatencyCommand {
    /// Analytic table from per-layer MAC counts.
    MakeSynthetic(MakeSyntheticArgs),
    /// Check that a table covers every key of a backbone.
    Validate(ValidateTableArgs),
}

#[derive(Args, Debug)]
pub struct BackboneArgs {
    /// Backbone configuration (JSON). Defaults to the built-in preset.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    pub preset: Preset,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Default,
    Tiny,
    Minimal,
}

#[derive(Args, Debug)]
pub struct MakeSyntheticArgs {
    #[command(flatten)]
    pub backbone: BackboneArgs,
    #[arg(long, default_value_t = 10.0)]
    pub coeff: f64,
    #[arg(long, default_value_t = 0.0)]
    pub overhead: f64,
    #[arg(long, default_value_t = 0.55)]
    pub b4: f64,
    #[arg(long, default_value_t = 0.7)]
    pub b8: f64,
    #[arg(long, default_value_t = 1.0)]
    pub b16: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct ValidateTableArgs {
    #[command(flatten)]
    pub backbone: BackboneArgs,
    #[arg(long)]
    pub table: PathBuf,
}

/// Train/validation split of the training images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Half for weights, half for threshold updates.
    #[default]
    Half,
    /// Fraction kept for weight training.
    Fraction(f64),
}

impl Split {
    pub fn train_fraction(self) -> f64 {
        match self {
            Split::Half => 0.5,
            Split::Fraction(f) => f,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub kind: DatasetKind,
    /// Archive written by `ingest`. Required for CIFAR-10.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Generator parameters for a synthetic dataset without `path`.
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
    /// Original class ids to keep, relabelled to `0..len`.
    #[serde(default)]
    pub classes: Option<Vec<usize>>,
    /// Expected image resolution, checked after loading.
    #[serde(default)]
    pub resolution: Option<usize>,
    #[serde(default)]
    pub split: Split,
    #[serde(default)]
    pub split_seed: u64,
}

impl DatasetDescriptor {
    fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        match (&self.path, self.kind) {
            (Some(path), _) if !path.is_file() => p.push(format!("dataset archive {} does not exist", path.display())),
            (None, DatasetKind::Cifar10) => p.push("cifar10 dataset needs `path` (run `ingest` first)".into()),
            (None, DatasetKind::Synthetic) if self.synthetic.is_none() => {
                p.push("synthetic dataset needs `path` or `synthetic` parameters".into())
            }
            _ => {}
        }
        let f = self.split.train_fraction();
        if !(f > 0.0 && f < 1.0) {
            p.push(format!("split fraction {f} must lie in (0, 1)"));
        }
        if let Some(c) = &self.classes {
            let mut s = c.clone();
            s.sort_unstable();
            s.dedup();
            if s.len() != c.len() || c.len() < 2 {
                p.push(format!("class subset {c:?} needs at least two distinct classes"));
            }
        }
        p
    }

    /// The full training pool, before any class filtering or splitting.
    fn load_pool(&self) -> Result<Dataset> {
        match &self.path {
            Some(path) => {
                let a = Archive::load(path, DATASET_KIND)?;
                let classes = a.meta["num_classes"]
                    .as_u64()
                    .ok_or_else(|| Error::Data(format!("{}: manifest lacks num_classes", path.display())))?;
                Dataset::from_archive(&a, "train.", classes as usize)
            }
            None => data::synthetic(self.synthetic.as_ref().expect("validated")),
        }
    }

    pub fn load(&self) -> Result<SearchData> {
        let mut pool = self.load_pool()?;
        if let Some(c) = &self.classes {
            pool = pool.filter_classes(c)?;
        }
        if let Some(r) = self.resolution {
            if pool.resolution != r {
                return Err(Error::Data(format!("dataset resolution {} but descriptor says {r}", pool.resolution)));
            }
        }
        let (train, val) = pool.split(self.split.train_fraction(), self.split_seed)?;
        Ok(SearchData { train, val })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatencySource {
    Table {
        path: PathBuf,
    },
    Synthetic {
        coeff_ms_per_mmac: f64,
        #[serde(default)]
        factors: BitFactors,
        #[serde(default)]
        overhead_ms: f64,
    },
}

impl LatencySource {
    pub fn load(&self, backbone: &BackboneConfig) -> Result<LatencyTable> {
        match self {
            LatencySource::Table { path } => LatencyTable::load(path, backbone.num_layers()),
            LatencySource::Synthetic {
                coeff_ms_per_mmac,
                factors,
                overhead_ms,
            } => synth_latency_table(backbone, *coeff_ms_per_mmac, factors, *overhead_ms),
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub search: SearchConfig,
    pub reward: RewardConfig,
    pub dataset: DatasetDescriptor,
    pub latency: LatencySource,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies command-line overrides.
    pub fn apply(&mut self, args: &RunArgs) {
        if let Some(s) = args.seed {
            self.search.rng_seed = s;
        }
        if let Some(e) = args.epochs {
            self.search.max_epochs = e;
        }
        if let Some(mu) = args.mu {
            self.reward.mu = mu;
        }
        if let Some(nu) = args.nu {
            self.reward.nu = nu;
        }
        if let Some(o) = &args.out {
            self.output_dir = o.clone();
        }
    }

    /// Checks everything that can be checked without loading data and
    /// reports every problem at once.
    pub fn validate(&self) -> Result<()> {
        let mut p: Vec<String> = [self.backbone.validate(), self.search.validate(), self.reward.validate()]
            .into_iter()
            .filter_map(|r| r.err().map(|e| e.to_string()))
            .collect();
        p.extend(self.dataset.problems());
        if let LatencySource::Table { path } = &self.latency {
            if !path.is_file() {
                p.push(format!("latency table {} does not exist", path.display()));
            }
        }
        if let Some(c) = &self.dataset.classes {
            if c.len() != self.backbone.num_classes {
                p.push(format!("{} classes selected, backbone has {}", c.len(), self.backbone.num_classes));
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    /// Loads data and the latency table and cross-checks them with the
    /// backbone and search settings.
    pub fn prepare(&self) -> Result<(SearchData, Objective)> {
        self.validate()?;
        let data = self.dataset.load()?;
        let latency = self.latency.load(&self.backbone)?;
        data.validate(&self.backbone)?;
        Ok((
            data,
            Objective {
                reward: self.reward.clone(),
                latency,
            },
        ))
    }
}

/// Resolves a relative output path against `$BITSHARE_NAS_OUT`.
pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}

fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn prepare_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!("{} exists; pass --force to overwrite", path.display())));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

/// Writes an ingested dataset archive and returns its path.
pub fn cmd_ingest(args: &IngestArgs) -> Result<PathBuf> {
    let out = resolve_output(&args.out);
    prepare_file(&out, args.force)?;
    let archive = match args.kind {
        DatasetKind::Cifar10 => {
            let dir = args.dir.as_ref().ok_or_else(|| Error::Config("--dir is required for cifar10".into()))?;
            let (train_raw, test_raw) = data::read_cifar10(dir)?;
            let stats = data::channel_stats(&train_raw, 3);
            let train = data::normalize(&train_raw, &stats, data::CIFAR_RESOLUTION, args.downsample)?;
            let test = data::normalize(&test_raw, &stats, data::CIFAR_RESOLUTION, args.downsample)?;
            let meta = serde_json::json!({
                "source": "cifar10",
                "num_classes": data::CIFAR_CLASSES,
                "resolution": train.resolution,
                "stats": stats,
            });
            let mut a = Archive::new(DATASET_KIND, meta);
            train.push_into(&mut a, "train.");
            test.push_into(&mut a, "test.");
            a
        }
        DatasetKind::Synthetic => {
            let cfg = SyntheticConfig {
                num_classes: args.classes,
                samples: args.samples,
                resolution: args.resolution,
                noise: args.noise,
                seed: args.seed,
                ..SyntheticConfig::default()
            };
            let d = data::synthetic(&cfg)?;
            let meta = serde_json::json!({
                "source": "synthetic",
                "num_classes": cfg.num_classes,
                "resolution": cfg.resolution,
                "synthetic": cfg,
            });
            let mut a = Archive::new(DATASET_KIND, meta);
            d.push_into(&mut a, "train.");
            a
        }
    };
    archive.save(&out)?;
    Ok(out)
}

fn load_run(args: &RunArgs) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.apply(args);
    cfg.validate()?;
    let dir = resolve_output(&cfg.output_dir);
    Ok((cfg, dir))
}

fn write_outcome(dir: &Path, cfg: &RunConfig, out: &SearchOutcome) -> Result<()> {
    fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(cfg)?)?;
    out.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    fs::write(dir.join(RESULT_FILE), out.result.to_json()?)?;
    if let Some(s) = &out.result.subnet {
        s.save(&dir.join(SUBNET_FILE))?;
    }
    Ok(())
}

/// Runs a search and writes the checkpoint, result JSON and subnet archive
/// into the output directory.
pub fn cmd_search(args: &RunArgs) -> Result<(PathBuf, SearchOutcome)> {
    let (cfg, dir) = load_run(args)?;
    let (data, objective) = cfg.prepare()?;
    prepare_dir(&dir, args.force)?;
    let out = search::run_search(&cfg.backbone, &data, &objective, &cfg.search, None)?;
    write_outcome(&dir, &cfg, &out)?;
    Ok((dir, out))
}

/// Warm-starts from a checkpoint. Besides the search artifacts it writes
/// `evolve.json` (epochs to target and per-epoch accuracy) and `drift.csv`.
pub fn cmd_evolve(args: &EvolveArgs) -> Result<(PathBuf, SearchOutcome)> {
    let (mut cfg, dir) = load_run(&args.run)?;
    if let Some(t) = args.target_accuracy {
        cfg.search.target_accuracy = Some(t);
    }
    if !args.checkpoint.is_file() {
        return Err(Error::Checkpoint(format!("checkpoint {} does not exist", args.checkpoint.display())));
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let diff = ckpt.state.net.config.structural_diff(&cfg.backbone);
    if !diff.is_empty() {
        return Err(Error::Structure(diff));
    }
    let (data, objective) = cfg.prepare()?;
    prepare_dir(&dir, args.run.force)?;
    let out = search::evolve(&ckpt, &cfg.backbone, &data, &objective, &cfg.search)?;
    write_outcome(&dir, &cfg, &out)?;
    let report = out.result.evolve.as_ref().expect("evolve sets the report");
    let curve: Vec<(usize, f64)> = out.result.history.iter().map(|h| (h.epoch, h.val_accuracy)).collect();
    let summary = serde_json::json!({
        "report": report,
        "accuracy_by_epoch": curve,
        "final_accuracy": out.result.final_accuracy,
    });
    fs::write(dir.join(EVOLVE_FILE), serde_json::to_string_pretty(&summary)?)?;
    let mut w = csv::Writer::from_path(dir.join(DRIFT_FILE))?;
    for d in &report.drift {
        w.serialize(d)?;
    }
    w.flush()?;
    Ok((dir, out))
}

#[derive(Serialize)]
struct CurveRow {
    epoch: usize,
    val_acc: f64,
    expected_latency: f64,
    reward: f64,
}

#[derive(Serialize)]
struct ParetoRow {
    index: usize,
    accuracy: f64,
    latency_ms: f64,
    reward: f64,
    non_dominated: bool,
}

/// One layer of `spec.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub skipped: bool,
    pub kernel: u8,
    pub expand: u8,
    pub bits: u32,
}

/// Writes `curves.csv`, `pareto.csv` and `spec.json`.
pub fn cmd_report(args: &ReportArgs) -> Result<PathBuf> {
    let text = fs::read_to_string(&args.result)
        .map_err(|e| Error::Data(format!("cannot read result {}: {e}", args.result.display())))?;
    let result = SearchResult::from_json(&text)?;
    let dir = resolve_output(&args.out);
    prepare_dir(&dir, args.force)?;
    write_report(&result, &dir)?;
    Ok(dir)
}

pub fn write_report(result: &SearchResult, dir: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("curves.csv"))?;
    for h in &result.history {
        w.serialize(CurveRow {
            epoch: h.epoch,
            val_acc: h.val_accuracy,
            expected_latency: h.expected_latency,
            reward: h.reward,
        })?;
    }
    w.flush()?;
    let flags = non_dominated_flags(&result.recent);
    let mut w = csv::Writer::from_path(dir.join("pareto.csv"))?;
    for (index, (m, nd)) in result.recent.iter().zip(flags).enumerate() {
        w.serialize(ParetoRow {
            index,
            accuracy: m.accuracy,
            latency_ms: m.latency_ms,
            reward: m.reward,
            non_dominated: nd,
        })?;
    }
    w.flush()?;
    let layers: Vec<LayerReport> = result
        .spec
        .arch
        .iter()
        .zip(&result.spec.quant)
        .enumerate()
        .map(|(layer, (a, b))| LayerReport {
            layer,
            skipped: a.is_skip(),
            kernel: a.kernel,
            expand: a.expand,
            bits: b.count(),
        })
        .collect();
    fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&layers)?)?;
    Ok(())
}

impl BackboneArgs {
    pub fn load(&self) -> Result<BackboneConfig> {
        let cfg = match &self.backbone {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read backbone {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => match self.preset {
                Preset::Default => BackboneConfig {
                    num_classes: self.classes,
                    ..BackboneConfig::default()
                },
                Preset::Tiny => BackboneConfig::tiny(self.classes),
                Preset::Minimal => BackboneConfig::minimal(self.classes),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Generates a synthetic table (returning its path) or validates one
/// (returning the table).
pub fn cmd_latency(cmd: &LatencyCommand) -> Result<(PathBuf, LatencyTable)> {
    match cmd {
        LatencyCommand::MakeSynthetic(a) => {
            let backbone = a.backbone.load()?;
            let out = resolve_output(&a.out);
            prepare_file(&out, a.force)?;
            let factors = BitFactors {
                b4: a.b4,
                b8: a.b8,
                b16: a.b16,
            };
            let table = synth_latency_table(&backbone, a.coeff, &factors, a.overhead)?;
            table.save(&out)?;
            Ok((out, table))
        }
        LatencyCommand::Validate(a) => {
            let backbone = a.backbone.load()?;
            let table = LatencyTable::load(&a.table, backbone.num_layers())?;
            Ok((a.table.clone(), table))
        }
    }
}

/// Dispatches a parsed command and returns a one-line summary.
pub fn run(cli: &Cli) -> Result<String> {
    Ok(match &cli.command {
        Command::Ingest(a) => format!("wrote {}", cmd_ingest(a)?.display()),
        Command::Search(a) => {
            let (dir, out) = cmd_search(a)?;
            summary(&dir, &out.result)
        }
        Command::Evolve(a) => {
            let (dir, out) = cmd_evolve(a)?;
            let e = out.result.evolve.as_ref().expect("evolve report");
            format!(
                "{}; epochs to target: {}",
                summary(&dir, &out.result),
                e.epochs_to_target.map_or("not reached".into(), |n| n.to_string())
            )
        }
        Command::Report(a) => format!("wrote report to {}", cmd_report(a)?.display()),
        Command::Latency(c) => {
            let (path, t) = cmd_latency(c)?;
            format!("{}: {} layers, {} entries, valid", path.display(), t.num_layers, t.entries.len())
        }
    })
}

fn summary(dir: &Path, r: &SearchResult) -> String {
    format!(
        "wrote {}: accuracy {:.4}, latency {:.4} ms, {:.0} bytes",
        dir.display(),
        r.final_accuracy,
        r.final_latency_ms,
        r.model_size_bytes
    )
}
