//! Experiment configuration: one TOML file per experiment, every field
//! optional with the shipped defaults, CLI flags overriding the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::enrichment::{EnrichmentSets, GraphConfig, WindowConfig};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::pipelines::TrainConfig;

/// Environment variable holding the default root for relative run
/// directories.
pub const RUN_ROOT_ENV: &str = "FCADAPT_RUN_ROOT";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsSection {
    pub run_dir: Option<PathBuf>,
    pub source_manifest: Option<PathBuf>,
    pub target_manifest: Option<PathBuf>,
    pub auxiliary_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub seed: u64,
    pub branches: Vec<String>,
    pub feature_dim: usize,
    pub freeze_norm_stats: bool,
    /// Drop auxiliary subjects shorter than this many time points.
    pub min_series_length: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainConfig::default();
        TrainSection {
            batch_size: base.batch_size,
            lr0: base.lr0,
            lr_decay_factor: base.lr_decay_factor,
            lr_decay_every: base.lr_decay_every,
            epochs: base.epochs,
            seed: base.seed,
            branches: base.branch_kinds.iter().map(|k| k.as_str().to_string()).collect(),
            feature_dim: base.feature_dim,
            freeze_norm_stats: base.freeze_norm_stats,
            min_series_length: 0,
            checkpoint_every: base.checkpoint_every,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub threshold: f64,
    pub top_k: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            threshold: 0.5,
            top_k: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecSection {
    pub deterministic: bool,
    pub parallel: bool,
}

impl Default for ExecSection {
    fn default() -> Self {
        ExecSection {
            deterministic: true,
            parallel: true,
        }
    }
}

/// The full experiment file. Defaults reproduce the shipped configuration:
/// window 40/30, keep ratio 0.3, feature dim 64, three branches, lr 3e-4,
/// batch 64, 150 epochs halving every 50.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub paths: PathsSection,
    pub window: WindowConfig,
    pub graph: GraphConfig,
    pub enrichment: EnrichmentSets,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub exec: ExecSection,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config '{}': {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config()?.validate()?;
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(Error::Config("eval.threshold must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Assembles the pipeline-facing training config from the sections.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut kinds = Vec::new();
        for name in &self.train.branches {
            let kind = match name.as_str() {
                "warp" => crate::enrichment::BranchKind::Warp,
                "receptive-field" => crate::enrichment::BranchKind::ReceptiveField,
                "slice" => crate::enrichment::BranchKind::Slice,
                other => {
                    return Err(Error::Config(format!(
                        "unknown branch kind '{other}' (expected warp, receptive-field, slice)"
                    )))
                }
            };
            kinds.push(kind);
        }
        Ok(TrainConfig {
            batch_size: self.train.batch_size,
            lr0: self.train.lr0,
            lr_decay_factor: self.train.lr_decay_factor,
            lr_decay_every: self.train.lr_decay_every,
            epochs: self.train.epochs,
            seed: self.train.seed,
            branch_kinds: kinds,
            feature_dim: self.train.feature_dim,
            window: self.window,
            graph: self.graph,
            enrichment: self.enrichment.clone(),
            freeze_norm_stats: self.train.freeze_norm_stats,
            checkpoint_every: self.train.checkpoint_every,
            exec: self.exec_mode(),
        })
    }

    pub fn exec_mode(&self) -> ExecMode {
        if self.exec.parallel {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }

    /// The resolved configuration as TOML, for `config.snapshot`.
    pub fn snapshot_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Run directory: explicit paths win; relative paths are anchored at
    /// `$FCADAPT_RUN_ROOT` when set.
    pub fn resolve_run_dir(&self) -> PathBuf {
        let dir = self
            .paths
            .run_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs/default"));
        if dir.is_absolute() {
            return dir;
        }
        match std::env::var_os(RUN_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(dir),
            None => dir,
        }
    }
}
