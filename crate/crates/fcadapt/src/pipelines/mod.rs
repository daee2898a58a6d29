//! Training procedures and branch-ensembled inference.
//!
//! Three pipelines share one trainer core:
//! - [`pretrain_unsupervised`]: independent random branches minimize the
//!   mutual-consistency loss on unlabeled auxiliary data.
//! - [`train_source`]: a single plain-view branch minimizes binary
//!   cross-entropy on labeled source data.
//! - [`adapt_target`]: branches start as copies of the source parameters
//!   and minimize mutual consistency on unlabeled target data; labels are
//!   never read (the [`AuditedCohort`] handle counts every label access).
//!
//! All pipelines are deterministic given (data, config, seed) at any thread
//! count: per-step randomness is derived from counters rather than consumed
//! sequentially, and parallel per-subject results are reduced in input
//! order.

mod checkpoint;
mod train;

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::data::RoiTimeseries;
use crate::encoder::{
    encode_subject, BranchOutput, EncoderDims, EncoderParams, DEFAULT_FEATURE_DIM,
};
use crate::enrichment::{
    build_graph_sequence, BranchKind, Enrichment, EnrichmentSets, GraphConfig, WindowConfig,
};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::objectives::average_parameters;
use crate::tape::sigmoid;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, RunDir, CHECKPOINT_SCHEMA,
};
pub use train::{Adam, EpochRecord, ResumeState, TrainLog, TrainOptions, TrainerSnapshot};

/// Everything a training run needs besides the data.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Initial learning rate.
    pub lr0: f64,
    /// Learning rate multiplier applied every `lr_decay_every` epochs.
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Enrichment family of each adaptation branch.
    pub branch_kinds: Vec<BranchKind>,
    /// Encoder feature width `D`.
    pub feature_dim: usize,
    pub window: WindowConfig,
    pub graph: GraphConfig,
    pub enrichment: EnrichmentSets,
    /// Keep normalization running statistics fixed during training.
    pub freeze_norm_stats: bool,
    /// Write a checkpoint every this many epochs (when a run recorder is
    /// attached).
    pub checkpoint_every: usize,
    pub exec: ExecMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr0: 3e-4,
            lr_decay_factor: 0.5,
            lr_decay_every: 50,
            epochs: 150,
            seed: 42,
            branch_kinds: vec![BranchKind::Warp, BranchKind::ReceptiveField, BranchKind::Slice],
            feature_dim: DEFAULT_FEATURE_DIM,
            window: WindowConfig::default(),
            graph: GraphConfig::default(),
            enrichment: EnrichmentSets::default(),
            freeze_norm_stats: false,
            checkpoint_every: 1,
            exec: ExecMode::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::Config("lr0 must be finite and > 0".into()));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return Err(Error::Config("lr_decay_factor must be finite and > 0".into()));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::Config("lr_decay_every must be positive".into()));
        }
        if self.branch_kinds.is_empty() {
            return Err(Error::Config("need at least one branch kind".into()));
        }
        let mut kinds = self.branch_kinds.clone();
        kinds.dedup();
        if kinds.len() != self.branch_kinds.len() {
            return Err(Error::Config("branch kinds must be distinct".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        self.window.validate()?;
        self.graph.validate()?;
        self.enrichment.validate()?;
        EncoderDims::new(2, self.feature_dim)?;
        Ok(())
    }

    pub fn encode_settings(&self) -> EncodeSettings {
        EncodeSettings {
            window: self.window,
            graph: self.graph,
        }
    }
}

/// Stepped learning rate: `lr0 * factor^(epoch / every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32)
}

/// Graph-construction settings shared by training and inference.
#[derive(Debug, Clone, Copy)]
pub struct EncodeSettings {
    pub window: WindowConfig,
    pub graph: GraphConfig,
}

/// Multi-branch state: parameters plus each branch's enrichment family
/// (`None` for a plain-view branch, e.g. a source-only model).
#[derive(Debug, Clone)]
pub struct MfeState {
    pub branches: Vec<EncoderParams>,
    pub kinds: Vec<Option<BranchKind>>,
    pub epoch: usize,
    pub seed: u64,
}

impl MfeState {
    /// Single plain-view branch (a source model).
    pub fn single(params: EncoderParams, seed: u64) -> Self {
        MfeState {
            branches: vec![params],
            kinds: vec![None],
            epoch: 0,
            seed,
        }
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }
}

/// Cohort handle that physically separates labels from series and counts
/// every label access, so the source-free contract is auditable.
#[derive(Debug)]
pub struct AuditedCohort {
    series: Vec<RoiTimeseries>,
    labels: Vec<Option<bool>>,
    reads: AtomicUsize,
}

impl AuditedCohort {
    /// Takes ownership of a loaded cohort; labels are moved out of the
    /// series into the audited store.
    pub fn new(mut series: Vec<RoiTimeseries>) -> Self {
        let labels = series.iter_mut().map(|s| s.label.take()).collect();
        AuditedCohort {
            series,
            labels,
            reads: AtomicUsize::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    /// Label-free view of the series.
    pub fn series(&self) -> &[RoiTimeseries] {
        &self.series
    }

    /// Reads one label, leaving a trace in the access log.
    pub fn label(&self, index: usize) -> Option<bool> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.labels[index]
    }

    /// Number of label accesses so far.
    pub fn label_reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }
}

fn check_shared_roi_count(series: &[RoiTimeseries]) -> Result<usize> {
    let first = series
        .first()
        .ok_or_else(|| Error::Config("empty cohort".into()))?;
    let n = first.rois();
    for s in series {
        if s.rois() != n {
            return Err(Error::Schema(format!(
                "subject '{}' has {} ROIs, expected {n}",
                s.subject_id,
                s.rois()
            )));
        }
    }
    Ok(n)
}

/// Unsupervised pretraining: `m` independently initialized branches
/// minimize mutual consistency on unlabeled data.
pub fn pretrain_unsupervised(
    auxiliary: &AuditedCohort,
    cfg: &TrainConfig,
) -> Result<(MfeState, TrainLog)> {
    pretrain_unsupervised_with(auxiliary, cfg, TrainOptions::default())
}

pub fn pretrain_unsupervised_with(
    auxiliary: &AuditedCohort,
    cfg: &TrainConfig,
    options: TrainOptions<'_>,
) -> Result<(MfeState, TrainLog)> {
    cfg.validate()?;
    let n = check_shared_roi_count(auxiliary.series())?;
    let dims = EncoderDims::new(n, cfg.feature_dim)?;
    let kinds: Vec<Option<BranchKind>> = cfg.branch_kinds.iter().map(|&k| Some(k)).collect();
    let branches: Vec<EncoderParams> = (0..kinds.len())
        .map(|i| {
            EncoderParams::init_seeded(dims, train::derive_seed(cfg.seed, &[1, i as u64]))
        })
        .collect();
    train::run(
        auxiliary.series(),
        branches,
        kinds,
        train::Objective::Consistency,
        cfg,
        options,
    )
}

/// Branch-averaged initialization for the source model.
pub fn init_source_from_pretrain(state: &MfeState) -> Result<EncoderParams> {
    average_parameters(&state.branches)
}

/// Supervised source training of a single plain-view branch with binary
/// cross-entropy. `init` of `None` draws fresh parameters from the seed.
pub fn train_source(
    source: &[RoiTimeseries],
    init: Option<EncoderParams>,
    cfg: &TrainConfig,
) -> Result<(EncoderParams, TrainLog)> {
    train_source_with(source, init, cfg, TrainOptions::default())
}

pub fn train_source_with(
    source: &[RoiTimeseries],
    init: Option<EncoderParams>,
    cfg: &TrainConfig,
    options: TrainOptions<'_>,
) -> Result<(EncoderParams, TrainLog)> {
    cfg.validate()?;
    let n = check_shared_roi_count(source)?;
    let dims = EncoderDims::new(n, cfg.feature_dim)?;
    let labels: Vec<bool> = source
        .iter()
        .map(|s| {
            s.label.ok_or_else(|| {
                Error::Config(format!("unlabeled source entry '{}'", s.subject_id))
            })
        })
        .collect::<Result<_>>()?;
    let init = match init {
        Some(params) => {
            if params.dims != dims {
                return Err(Error::Checkpoint(format!(
                    "init parameters built for {:?}, data needs {:?}",
                    params.dims, dims
                )));
            }
            params
        }
        None => EncoderParams::init_seeded(dims, train::derive_seed(cfg.seed, &[2])),
    };
    let (state, mut log) = train::run(
        source,
        vec![init],
        vec![None],
        train::Objective::SourceBce { labels: &labels },
        cfg,
        options,
    )?;
    if labels.iter().all(|&y| y) || labels.iter().all(|&y| !y) {
        log.warnings.push("degenerate cohort: all source labels identical".to_string());
    }
    let params = state.branches.into_iter().next().expect("one branch");
    Ok((params, log))
}

/// Source-free adaptation: every branch starts as a copy of the source
/// parameters and the branches are fine-tuned under mutual consistency.
/// Target labels are never read.
pub fn adapt_target(
    target: &AuditedCohort,
    source_params: &EncoderParams,
    cfg: &TrainConfig,
) -> Result<(MfeState, TrainLog)> {
    adapt_target_with(target, source_params, cfg, TrainOptions::default())
}

pub fn adapt_target_with(
    target: &AuditedCohort,
    source_params: &EncoderParams,
    cfg: &TrainConfig,
    options: TrainOptions<'_>,
) -> Result<(MfeState, TrainLog)> {
    cfg.validate()?;
    let n = check_shared_roi_count(target.series())?;
    if source_params.dims.n != n {
        return Err(Error::Checkpoint(format!(
            "source model expects {} ROIs, target data has {n}",
            source_params.dims.n
        )));
    }
    if source_params.dims.d != cfg.feature_dim {
        return Err(Error::Checkpoint(format!(
            "source model has feature dim {}, config says {}",
            source_params.dims.d, cfg.feature_dim
        )));
    }
    let kinds: Vec<Option<BranchKind>> = cfg.branch_kinds.iter().map(|&k| Some(k)).collect();
    let branches = vec![source_params.clone(); kinds.len()];
    train::run(
        target.series(),
        branches,
        kinds,
        train::Objective::Consistency,
        cfg,
        options,
    )
}

/// Per-branch encoder outputs for one subject under the deterministic
/// neutral view (every branch sees the standard windowing, so the graph
/// sequence is built once and shared).
pub fn ensemble_outputs(
    series: &RoiTimeseries,
    state: &MfeState,
    settings: &EncodeSettings,
) -> Result<Vec<BranchOutput>> {
    if state.branches.is_empty() {
        return Err(Error::Contract("ensemble needs at least one branch".into()));
    }
    // Every branch's neutral view (warp 1.0, receptive field = the standard
    // window length, slice ratio 1.0) reduces to plain windowing, so one
    // graph sequence serves all branches.
    let graphs = build_graph_sequence(series, &Enrichment::None, &settings.window, &settings.graph)?;
    state
        .branches
        .iter()
        .map(|params| encode_subject(&graphs, params))
        .collect()
}

/// Mean of the branch sigmoid probabilities for one subject.
pub fn ensemble_predict(
    series: &RoiTimeseries,
    state: &MfeState,
    settings: &EncodeSettings,
) -> Result<f64> {
    let outputs = ensemble_outputs(series, state, settings)?;
    let sum: f64 = outputs.iter().map(|o| sigmoid(o.logit)).sum();
    Ok(sum / outputs.len() as f64)
}

/// Ensemble probabilities for a whole cohort, fanned out per subject.
pub fn predict_cohort(
    series: &[RoiTimeseries],
    state: &MfeState,
    settings: &EncodeSettings,
    exec: ExecMode,
) -> Result<Vec<f64>> {
    crate::exec::map_indices(series.len(), exec, |i| {
        ensemble_predict(&series[i], state, settings)
    })
    .into_iter()
    .collect()
}
