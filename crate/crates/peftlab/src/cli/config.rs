//! Experiment configuration: one JSON file describes one run.
//!
//! `normalize` materializes every default and derives component seeds from
//! the experiment seed (a component seed of 0 means "derive me"), so the
//! normalized form — what `config.lock` records — round-trips exactly:
//! `parse(serialize(cfg)) == cfg`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::model::{ModelError, ModelSpec, SiteGroup};
use crate::ntk::NtkError;
use crate::peft::{AdapterSpec, PeftError, Pooling};
use crate::trainer::{TrainConfig, TrainError};

/// Runner errors carrying their process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration (exit 2).
    Config(String),
    /// Bad or missing data (exit 3).
    Data(String),
    /// Training diverged (exit 4).
    Diverged { step: u64 },
    /// A resource cap was exceeded (exit 5).
    Resource(String),
    /// Filesystem trouble (exit 1).
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Diverged { .. } => 4,
            CliError::Resource(_) => 5,
            CliError::Io(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Diverged { step } => write!(f, "diverged at step {step}"),
            CliError::Resource(m) => write!(f, "resource limit: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<PeftError> for CliError {
    fn from(e: PeftError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { step } => CliError::Diverged { step },
            TrainError::Data(m) => CliError::Data(m),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<NtkError> for CliError {
    fn from(e: NtkError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<crate::checkpoint::CheckpointError> for CliError {
    fn from(e: crate::checkpoint::CheckpointError) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    /// Gaussian blobs: class centers are mutually orthogonal directions of
    /// norm `separation`, noise is the cluster standard deviation.
    Blobs,
    /// Two interleaved half-moons in 2-D.
    Moons,
    /// Token sequences labelled by keyword presence.
    Keywords,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub generator: GeneratorKind,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Cluster/noise standard deviation; generator-specific default when
    /// absent (1.0 for blobs, 0.1 for moons).
    #[serde(default)]
    pub noise: Option<f64>,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_keywords")]
    pub keywords: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub val_fraction: f64,
}

fn default_n() -> usize {
    200
}
fn default_dim() -> usize {
    8
}
fn default_classes() -> usize {
    2
}
fn default_separation() -> f64 {
    3.0
}
fn default_vocab() -> usize {
    32
}
fn default_seq_len() -> usize {
    12
}
fn default_keywords() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FileSpec {
    pub path: String,
    #[serde(default)]
    pub val_fraction: f64,
    /// Hash-vocabulary size for `label,text` files.
    #[serde(default = "default_file_vocab")]
    pub vocab_size: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_file_vocab() -> usize {
    1024
}

/// Exactly one dataset source per experiment.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    File(FileSpec),
}

impl DatasetSource {
    pub fn seed(&self) -> Option<u64> {
        match self {
            DatasetSource::Synthetic(s) => s.seed,
            DatasetSource::File(f) => f.seed,
        }
    }

    fn set_seed(&mut self, seed: u64) {
        match self {
            DatasetSource::Synthetic(s) => s.seed = Some(seed),
            DatasetSource::File(f) => f.seed = Some(seed),
        }
    }
}

/// Knobs for the `ntk` command.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NtkConfig {
    #[serde(default = "default_probes")]
    pub probes: usize,
    /// Training steps for the drift series.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: usize,
    #[serde(default = "default_jl_eps")]
    pub jl_eps: f64,
    #[serde(default = "default_jl_trials")]
    pub jl_trials: usize,
    #[serde(default = "default_jl_c")]
    pub jl_c: f64,
}

fn default_probes() -> usize {
    16
}
fn default_steps() -> usize {
    100
}
fn default_snapshot_every() -> usize {
    10
}
fn default_jl_eps() -> f64 {
    0.5
}
fn default_jl_trials() -> usize {
    10_000
}
fn default_jl_c() -> f64 {
    1.0
}

impl Default for NtkConfig {
    fn default() -> Self {
        NtkConfig {
            probes: default_probes(),
            steps: default_steps(),
            snapshot_every: default_snapshot_every(),
            jl_eps: default_jl_eps(),
            jl_trials: default_jl_trials(),
            jl_c: default_jl_c(),
        }
    }
}

/// Sweep axes; the product of the non-empty axes defines the runs.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct SweepAxes {
    #[serde(default)]
    pub degrees: Vec<i64>,
    #[serde(default)]
    pub poolings: Vec<Pooling>,
    #[serde(default)]
    pub site_groups: Vec<SiteGroup>,
}

impl SweepAxes {
    pub fn is_empty(&self) -> bool {
        self.degrees.is_empty() && self.poolings.is_empty() && self.site_groups.is_empty()
    }
}

/// Full declarative description of one experiment.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    #[serde(default = "AdapterSpec::none")]
    pub adapter: AdapterSpec,
    pub train: TrainConfig,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub ntk: NtkConfig,
    #[serde(default = "default_out")]
    pub output_dir: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sweep: SweepAxes,
    #[serde(default)]
    pub save_checkpoints: bool,
}

fn default_out() -> String {
    "out".into()
}

fn mix(seed: u64, lane: u64) -> u64 {
    let mut x = seed ^ lane.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x
}

impl ExperimentConfig {
    pub fn parse_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Fill derived fields in place. A CLI seed overrides the experiment
    /// seed and forces every component seed to be re-derived; otherwise a
    /// component seed of 0 (or absent) derives from the experiment seed.
    pub fn normalize(&mut self, cli_seed: Option<u64>) {
        if let Some(s) = cli_seed {
            self.seed = s;
            self.model.seed = 0;
            self.train.seed = 0;
            self.dataset.set_seed(mix(s, 3));
        }
        if self.model.seed == 0 {
            self.model.seed = mix(self.seed, 1);
        }
        if self.train.seed == 0 {
            self.train.seed = mix(self.seed, 2);
        }
        if self.dataset.seed().is_none() {
            let s = mix(self.seed, 3);
            self.dataset.set_seed(s);
        }
        self.train.adapter = self.adapter.clone();
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate().map_err(CliError::from)?;
        if let DatasetSource::Synthetic(s) = &self.dataset {
            if s.n == 0 {
                return Err(CliError::Config("synthetic dataset needs n >= 1".into()));
            }
            if !(0.0..1.0).contains(&s.val_fraction) {
                return Err(CliError::Config("val_fraction must lie in [0, 1)".into()));
            }
        }
        Ok(())
    }

    /// Normalized pretty-JSON echo; this is what `config.lock` holds.
    pub fn lock_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// FNV-1a over the normalized form: a deterministic identity for the
    /// run's inputs.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.lock_string().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        format!("{h:016x}")
    }

    pub fn out_path(&self) -> PathBuf {
        PathBuf::from(&self.output_dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "model": { "kind": "mlp", "depth": 2, "d_in": 8, "d_model": 16 },
        "adapter": { "kind": "propulsion", "sites": "all", "degree": 1 },
        "train": { "epochs": 3 },
        "dataset": { "source": "synthetic", "generator": "blobs", "n": 64 },
        "seed": 7
    }"#;

    #[test]
    fn parse_normalize_round_trip() {
        let mut cfg = ExperimentConfig::parse_str(MINIMAL).unwrap();
        cfg.normalize(None);
        cfg.validate().unwrap();
        let lock = cfg.lock_string();
        let mut reparsed = ExperimentConfig::parse_str(&lock).unwrap();
        reparsed.normalize(None);
        assert_eq!(cfg, reparsed);
        assert_eq!(reparsed.lock_string(), lock);
        assert_eq!(cfg.hash(), reparsed.hash());
    }

    #[test]
    fn component_seeds_derive_from_experiment_seed() {
        let mut a = ExperimentConfig::parse_str(MINIMAL).unwrap();
        a.normalize(None);
        assert_ne!(a.model.seed, 0);
        assert_ne!(a.train.seed, 0);
        assert!(a.dataset.seed().is_some());

        let mut b = ExperimentConfig::parse_str(MINIMAL).unwrap();
        b.normalize(None);
        assert_eq!(a.model.seed, b.model.seed);

        let mut c = ExperimentConfig::parse_str(MINIMAL).unwrap();
        c.normalize(Some(99));
        assert_ne!(c.model.seed, a.model.seed);
    }

    #[test]
    fn missing_required_field_names_it() {
        let err = ExperimentConfig::parse_str(r#"{ "model": { "kind": "mlp", "depth": 1, "d_model": 4 } }"#)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train") || msg.contains("dataset"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn adapter_spec_is_mirrored_into_train() {
        let mut cfg = ExperimentConfig::parse_str(MINIMAL).unwrap();
        cfg.normalize(None);
        assert_eq!(cfg.train.adapter, cfg.adapter);
    }
}
