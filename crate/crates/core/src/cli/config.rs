//! Per-subcommand config sections. Paths are relative to the config file.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::balancing::Strategy;
use crate::contrastive::{ContrastiveConfig, MultiCropMode, DEFAULT_ASPECT, MULTI_CROP_SMALL_SCALE, TWO_CROP_SCALE};
use crate::distill::Activation;
use crate::io::LabelKind;
use crate::pixel::DEFAULT_THRESHOLD;
use crate::{Error, Result};

/// Keys allowed at the top level besides the subcommand sections.
const TOP_LEVEL_KEYS: [&str; 2] = ["seed", "threads"];

pub(crate) const SECTIONS: [&str; 8] = [
    "affinity",
    "branch-search",
    "balance",
    "delta-mtl",
    "pixel-affinity",
    "contrastive-check",
    "crop-stats",
    "distill-check",
];

/// Parsed config file: optional global keys plus the raw sections.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    pub base_dir: PathBuf,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    table: toml::Table,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("<file>", e.message()))?;
        for key in table.keys() {
            if !TOP_LEVEL_KEYS.contains(&key.as_str()) && !SECTIONS.contains(&key.as_str()) {
                return Err(Error::config(key, "unknown top-level key"));
            }
        }
        let seed = match table.get("seed") {
            None => None,
            Some(toml::Value::Integer(i)) if *i >= 0 => Some(*i as u64),
            Some(_) => return Err(Error::config("seed", "expected a non-negative integer")),
        };
        let threads = match table.get("threads") {
            None => None,
            Some(toml::Value::Integer(i)) if *i >= 1 => Some(*i as usize),
            Some(_) => return Err(Error::config("threads", "expected a positive integer")),
        };
        Ok(ConfigFile {
            base_dir: PathBuf::new(),
            seed,
            threads,
            table,
        })
    }

    /// Deserializes one section; a missing section means all defaults.
    pub fn section<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        let value = match self.table.get(name) {
            Some(v @ toml::Value::Table(_)) => v.clone(),
            Some(_) => return Err(Error::config(name, "expected a table")),
            None => toml::Value::Table(toml::Table::new()),
        };
        T::deserialize(value).map_err(|e| {
            let msg = e.message().to_string();
            let key = backticked(&msg).map_or_else(|| name.to_string(), |k| format!("{name}.{k}"));
            Error::config(key, msg)
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

fn backticked(msg: &str) -> Option<&str> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(&msg[start..start + len])
}

/// SHA-256 of the canonical serialization of a resolved section.
pub fn digest<T: Serialize>(section: &str, value: &T) -> String {
    let body = toml::to_string(value).expect("config sections serialize");
    let mut h = Sha256::new();
    h.update(section.as_bytes());
    h.update(b"\n");
    h.update(body.as_bytes());
    hex::encode(h.finalize())
}

pub(crate) fn require<T>(value: &Option<T>, section: &str, key: &str, why: &str) -> Result<T>
where
    T: Clone,
{
    value
        .clone()
        .ok_or_else(|| Error::config(format!("{section}.{key}"), format!("missing; required {why}")))
}

fn default_images() -> usize {
    500
}
fn default_pattern() -> String {
    "{location}/{task}.mtkt".into()
}
fn default_top() -> usize {
    10
}
fn default_temperature() -> f64 {
    2.0
}
fn default_learning_rate() -> f64 {
    0.025
}
fn default_radius() -> usize {
    1
}
fn default_dilations() -> Vec<usize> {
    vec![1, 2, 4, 8]
}
fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}
fn default_two_crop() -> (f64, f64) {
    TWO_CROP_SCALE
}
fn default_small_crop() -> (f64, f64) {
    MULTI_CROP_SMALL_SCALE
}
fn default_aspect() -> (f64, f64) {
    DEFAULT_ASPECT
}
fn default_samples() -> usize {
    10_000
}
fn default_crops() -> usize {
    6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffinitySection {
    pub tasks: Vec<String>,
    pub locations: Vec<String>,
    /// `{location}` and `{task}` are substituted.
    #[serde(default = "default_pattern")]
    pub feature_pattern: String,
    #[serde(default = "default_images")]
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchSection {
    pub affinity: PathBuf,
    pub tasks: Option<Vec<String>>,
    pub locations: Option<Vec<String>>,
    pub shared_costs: Vec<f64>,
    pub decoder_costs: Vec<f64>,
    pub budget: f64,
    /// Ranked trees to write; 0 writes all.
    #[serde(default = "default_top")]
    pub top: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalanceSection {
    pub strategy: Strategy,
    pub trace: Option<PathBuf>,
    pub iteration: Option<u64>,
    pub weights: Option<Vec<f64>>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub sigmas: Option<Vec<f64>>,
    /// `[N, P]` tensor of per-task shared-layer gradients.
    pub gradients: Option<PathBuf>,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    pub kpis: Option<Vec<f64>>,
    pub focusing: Option<Vec<f64>>,
    pub average_losses: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaSection {
    pub model: PathBuf,
    pub baseline: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSpec {
    pub name: String,
    pub path: PathBuf,
    pub kind: LabelKind,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelSection {
    #[serde(default = "default_radius")]
    pub radius: usize,
    #[serde(default = "default_dilations")]
    pub dilations: Vec<usize>,
    pub labels: Vec<LabelSpec>,
}

fn default_dim() -> usize {
    16
}
fn default_backbone_dim() -> usize {
    32
}
fn default_negatives() -> usize {
    64
}
fn default_positives() -> usize {
    1
}
fn default_queue() -> usize {
    128
}
fn default_instances() -> usize {
    20
}
fn default_fd_step() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveSection {
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_backbone_dim")]
    pub backbone_dim: usize,
    #[serde(default = "default_positives")]
    pub positives: usize,
    #[serde(default = "default_negatives")]
    pub negatives: usize,
    #[serde(default = "default_queue")]
    pub queue_size: usize,
    #[serde(default = "default_instances")]
    pub instances: usize,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default)]
    pub params: ContrastiveParams,
}

/// Loss hyperparameters; defaults are the two-crop training values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveParams {
    pub temperature: f64,
    pub momentum: f64,
    pub neighbors: usize,
    pub nn_weight: f64,
}

impl Default for ContrastiveParams {
    fn default() -> Self {
        let c = ContrastiveConfig::default();
        ContrastiveParams {
            temperature: c.temperature,
            momentum: c.momentum,
            neighbors: c.neighbors,
            nn_weight: c.nn_weight,
        }
    }
}

impl From<ContrastiveParams> for ContrastiveConfig {
    fn from(p: ContrastiveParams) -> Self {
        ContrastiveConfig {
            temperature: p.temperature,
            momentum: p.momentum,
            neighbors: p.neighbors,
            nn_weight: p.nn_weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropStatsMode {
    #[default]
    Pairs,
    Multicrop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropSection {
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub mode: CropStatsMode,
    #[serde(default = "default_two_crop")]
    pub scale: (f64, f64),
    #[serde(default = "default_aspect")]
    pub aspect: (f64, f64),
    #[serde(default = "default_samples")]
    pub samples: usize,
    pub threshold: Option<f64>,
    #[serde(default = "default_crops")]
    pub crops: usize,
    #[serde(default = "default_small_crop")]
    pub small_scale: (f64, f64),
    #[serde(default)]
    pub constraint: MultiCropMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillOp {
    Padnet,
    Mtinet,
    Fpm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleSpec {
    pub features: Vec<PathBuf>,
    pub attention_weight: PathBuf,
    pub attention_bias: PathBuf,
    pub value_weight: PathBuf,
    pub value_bias: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSpec {
    pub squeeze_weight: PathBuf,
    pub squeeze_bias: PathBuf,
    pub excite_weight: PathBuf,
    pub excite_bias: PathBuf,
}

fn default_tolerance() -> f64 {
    1e-12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    pub op: DistillOp,
    pub features: Option<Vec<PathBuf>>,
    pub attention_weight: Option<PathBuf>,
    pub attention_bias: Option<PathBuf>,
    pub scales: Option<Vec<ScaleSpec>>,
    pub mix_weight: Option<PathBuf>,
    pub mix_bias: Option<PathBuf>,
    pub reduce_weight: Option<PathBuf>,
    pub reduce_bias: Option<PathBuf>,
    #[serde(default)]
    pub activation: Activation,
    pub gates: Option<Vec<GateSpec>>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

/// `--help` text listing every key of each section.
pub(crate) mod help {
    pub const AFFINITY: &str = "\
Config section [affinity]:
  tasks            list of task names (required)
  locations        list of location names (required)
  feature_pattern  path pattern with {location} and {task} (default \"{location}/{task}.mtkt\")
  images           number of leading images K used per RDM (default 500)
Each feature tensor is [K, ...]; trailing axes are flattened.
Writes affinity.mtkt ([D, N, N]) and affinity.csv.";

    pub const BRANCH: &str = "\
Config section [branch-search]:
  affinity       path to a [D, N, N] affinity tensor (required)
  tasks          task names (default task0..)
  locations      location names (default loc0..)
  shared_costs   per-location resource cost of one branch, length D (required)
  decoder_costs  per-task decoder cost, length N (required)
  budget         resource cap (required)
  top            number of ranked trees written, 0 for all (default 10)
Writes ranked.csv.";

    pub const BALANCE: &str = "\
Config section [balance]:
  strategy        fixed | uncertainty | gradnorm | dwa | dtp | mgda | heuristic (required)
  trace           loss trace CSV (gradnorm, dwa, heuristic; uncertainty losses)
  iteration       iteration to evaluate (default: last in trace)
  weights         current weights (fixed: required; gradnorm: default all ones)
  temperature     DWA temperature (default 2.0)
  sigmas          uncertainty noise parameters (default: closed-form optimum)
  gradients       [N, P] gradient tensor (mgda: required; gradnorm: overrides grad_norm)
  learning_rate   GradNorm weight step (default 0.025)
  kpis            DTP KPIs in (0, 1) (dtp: required)
  focusing        DTP focusing parameters (dtp: required)
  average_losses  heuristic averaged losses (default: trace means)
Writes weights.csv and details.csv.";

    pub const DELTA: &str = "\
Config section [delta-mtl]:
  model     metrics CSV of the multi-task model (required)
  baseline  metrics CSV of the single-task baselines (required)
Prints the relative performance in percent and writes delta.csv.";

    pub const PIXEL: &str = "\
Config section [pixel-affinity]:
  radius     patch radius r (default 1)
  dilations  dilation factors swept (default [1, 2, 4, 8])
  [[pixel-affinity.labels]]
    name       task name (required)
    path       [H, W] label tensor (required)
    kind       categorical | continuous (required)
    threshold  relative similarity threshold for continuous labels (default 0.05)
Writes sweep.csv.";

    pub const CONTRASTIVE: &str = "\
Config section [contrastive-check]:
  dim           head embedding dimension (default 16)
  backbone_dim  backbone embedding dimension (default 32)
  positives     positives per anchor (default 1)
  negatives     negatives per anchor (default 64)
  queue_size    queue capacity (default 128)
  instances     random instances checked (default 20)
  fd_step       central-difference step (default 1e-6)
  [contrastive-check.params]
    temperature (0.2), momentum (0.999), neighbors (20), nn_weight (0.4)
Writes checks.csv with losses and gradient errors per instance.";

    pub const CROP: &str = "\
Config section [crop-stats]:
  width, height  source image size (required)
  mode           pairs | multicrop (default pairs)
  scale          area-fraction range (default [0.2, 1.0])
  aspect         aspect-ratio range (default [0.75, 1.3333])
  samples        recorded pairs or anchors (default 10000)
  threshold      pairs: redraw pairs with IoU at or above this
  crops          multicrop: small crops per anchor (default 6)
  small_scale    multicrop: small-crop scale (default [0.05, 0.14])
  constraint     multicrop: overlap | contained (default overlap)
Writes histogram.csv and summary.csv.";

    pub const DISTILL: &str = "\
Config section [distill-check]:
  op                padnet | mtinet | fpm (required)
  features          per-task [C, H, W] tensors (padnet, fpm)
  attention_weight  [N, N, C, C] or [N, N, C, C, k, k] (padnet)
  attention_bias    [N, N, C] (padnet)
  [[distill-check.scales]]   (mtinet, one per scale)
    features, attention_weight, attention_bias, value_weight, value_bias
  mix_weight, mix_bias        [N*C, N*C], [N*C] (fpm)
  reduce_weight, reduce_bias  [C, N*C], [C] (fpm)
  activation        relu | identity (default relu)
  [[distill-check.gates]]    (fpm, optional, one per task)
    squeeze_weight, squeeze_bias, excite_weight, excite_bias
  tolerance         oracle agreement bound (default 1e-12)
Writes output tensors and report.csv comparing against a per-pixel reference.";
}
