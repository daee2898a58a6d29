//! Command-line surface: `gen-synth`, `pretrain`, `train-source`, `adapt`,
//! `evaluate`, `explain`.
//!
//! Exit codes are a stable contract: 0 success, 1 runtime failure, 2
//! usage/config error. Progress goes to stderr as structured lines;
//! stdout carries only machine-readable results.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::data::{
    generate_synthetic_cohort, load_cohort, validate_manifest, DatasetManifest, RoiTimeseries,
    SplitTag, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::evaluation::{emit_report, evaluate_cohort, roi_importance, Prediction};
use crate::exec::ExecMode;
use crate::objectives::average_parameters;
use crate::pipelines::{
    adapt_target_with, load_checkpoint, predict_cohort, pretrain_unsupervised_with,
    save_checkpoint, train_source_with, AuditedCohort, Checkpoint, EpochRecord, MfeState,
    ResumeState, RunDir, TrainConfig, TrainOptions, TrainerSnapshot,
};

#[derive(Debug, Parser)]
#[command(
    name = "fcadapt",
    version,
    about = "Source-free cohort adaptation for ROI time-series classifiers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment configuration file (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Force strictly sequential execution.
    #[arg(long)]
    pub deterministic: bool,
    /// Continue from the newest checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
    /// Override the config run directory.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic source/target cohort pair from a spec file.
    GenSynth {
        /// Synthetic cohort spec (TOML).
        spec: PathBuf,
        /// Output directory for the two cohorts.
        #[arg(long)]
        out: PathBuf,
    },
    /// Unsupervised multi-branch pretraining on auxiliary data.
    Pretrain {
        #[command(flatten)]
        args: RunArgs,
    },
    /// Supervised source-model training.
    TrainSource {
        #[command(flatten)]
        args: RunArgs,
        /// Initialize from a pretraining checkpoint (branch average).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Source-free adaptation of a pretrained source model to unlabeled
    /// target data.
    Adapt {
        #[command(flatten)]
        args: RunArgs,
        /// Source model checkpoint (the only source artifact allowed).
        #[arg(long)]
        source: PathBuf,
        /// Rejected: adaptation must not see source data.
        #[arg(long)]
        source_manifest: Option<PathBuf>,
    },
    /// Ensemble prediction plus the six metrics on a labeled manifest.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest override (defaults to paths.eval_manifest).
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// ROI-importance ranking from spatial attention.
    Explain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest override (defaults to paths.eval_manifest).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// How many ROIs to report (defaults to eval.top_k).
        #[arg(short, long)]
        k: Option<usize>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
}

/// Runs a parsed command, mapping errors onto the exit-code contract.
pub fn run(cli: Cli) -> u8 {
    let result = match cli.command {
        Command::GenSynth { spec, out } => cmd_gen_synth(&spec, &out),
        Command::Pretrain { args } => cmd_pretrain(&args),
        Command::TrainSource { args, init } => cmd_train_source(&args, init.as_deref()),
        Command::Adapt {
            args,
            source,
            source_manifest,
        } => cmd_adapt(&args, &source, source_manifest.as_deref()),
        Command::Evaluate {
            config,
            checkpoint,
            manifest,
            run_dir,
        } => cmd_evaluate(&config, &checkpoint, manifest.as_deref(), run_dir.as_deref()),
        Command::Explain {
            config,
            checkpoint,
            manifest,
            k,
            run_dir,
        } => cmd_explain(&config, &checkpoint, manifest.as_deref(), k, run_dir.as_deref()),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("fcadapt: error: {err}");
            err.exit_code()
        }
    }
}

fn cmd_gen_synth(spec_path: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let spec: SyntheticSpec = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("bad synthetic spec '{}': {e}", spec_path.display())))?;
    spec.validate()?;
    let cohort = generate_synthetic_cohort(&spec, out)?;
    eprintln!(
        "fcadapt: stage=gen-synth subjects_per_class={} rois={} seed={}",
        spec.subjects_per_class, spec.rois, spec.seed
    );
    println!("source_manifest={}", cohort.source_manifest.display());
    println!("target_manifest={}", cohort.target_manifest.display());
    Ok(())
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::from_file(&args.config)?;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if args.deterministic {
        config.exec.deterministic = true;
        config.exec.parallel = false;
    }
    if let Some(dir) = &args.run_dir {
        config.paths.run_dir = Some(dir.clone());
    }
    Ok(config)
}

fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::read(path)?;
    let report = validate_manifest(&manifest);
    if !report.ok {
        let problems: Vec<String> = report.problems().cloned().collect();
        return Err(Error::Config(format!(
            "manifest '{}' failed validation: {}",
            path.display(),
            problems.join("; ")
        )));
    }
    Ok(manifest)
}

/// Stage directory under the run dir, with snapshot written up front.
fn open_stage(config: &ExperimentConfig, stage: &str) -> Result<RunDir> {
    let dir = config.resolve_run_dir().join(stage);
    let mut run = RunDir::create(&dir)?;
    run.write_config_snapshot(&config.snapshot_toml())?;
    let _ = &mut run;
    Ok(run)
}

struct StageRecorder<'a> {
    run: &'a mut RunDir,
    stage: &'static str,
    cfg: TrainConfig,
}

impl StageRecorder<'_> {
    fn on_epoch(&mut self, record: &EpochRecord, snap: &TrainerSnapshot) -> Result<()> {
        self.run.append_metric(record)?;
        let last = snap.epoch == self.cfg.epochs;
        if snap.epoch % self.cfg.checkpoint_every == 0 || last {
            let ckpt = Checkpoint::new(
                snap.branches.to_vec(),
                snap.kinds.to_vec(),
                snap.epoch,
                snap.seed,
                Some(snap.adam.clone()),
            );
            save_checkpoint(&self.run.checkpoint_path(snap.epoch), &ckpt)?;
        }
        match (record.val_auc, record.val_acc) {
            (Some(auc), Some(acc)) => eprintln!(
                "fcadapt: stage={} epoch={} lr={:.6} loss={:.6} val_auc={auc:.4} val_acc={acc:.4}",
                self.stage, record.epoch, record.lr, record.loss
            ),
            _ => eprintln!(
                "fcadapt: stage={} epoch={} lr={:.6} loss={:.6}",
                self.stage, record.epoch, record.lr, record.loss
            ),
        }
        Ok(())
    }
}

fn resume_state(run: &mut RunDir, enabled: bool) -> Result<Option<ResumeState>> {
    if !enabled {
        return Ok(None);
    }
    let Some((epoch, path)) = run.latest_checkpoint()? else {
        return Ok(None);
    };
    let ckpt = load_checkpoint(&path)?;
    let adam = ckpt
        .adam
        .ok_or_else(|| Error::Checkpoint("resume checkpoint lacks optimizer state".into()))?;
    run.preload_metrics(epoch)?;
    eprintln!("fcadapt: resuming from {} (epoch {epoch})", path.display());
    Ok(Some(ResumeState {
        branches: ckpt.branches,
        kinds: ckpt.meta.kinds,
        adam,
        epoch,
    }))
}

/// Saves the end-of-run model and names it on stdout.
fn save_final(run: &RunDir, state: &MfeState) -> Result<PathBuf> {
    let path = run.root().join("model.ckpt");
    let ckpt = Checkpoint::new(
        state.branches.clone(),
        state.kinds.clone(),
        state.epoch,
        state.seed,
        None,
    );
    save_checkpoint(&path, &ckpt)?;
    println!("checkpoint={}", path.display());
    Ok(path)
}

fn cmd_pretrain(args: &RunArgs) -> Result<()> {
    let config = load_config(args)?;
    let cfg = config.train_config()?;
    let manifest_path = config
        .paths
        .auxiliary_manifest
        .clone()
        .ok_or_else(|| Error::Config("pretrain needs paths.auxiliary_manifest".into()))?;
    let manifest = read_manifest(&manifest_path)?;
    let manifest = if config.train.min_series_length > 0 {
        manifest.filter_min_length(config.train.min_series_length)?
    } else {
        manifest
    };
    let cohort = AuditedCohort::new(load_cohort(&manifest)?);
    eprintln!("fcadapt: stage=pretrain subjects={} seed={}", cohort.len(), cfg.seed);

    let mut run = open_stage(&config, "pretrain")?;
    let resume = resume_state(&mut run, args.resume)?;
    let mut recorder = StageRecorder {
        run: &mut run,
        stage: "pretrain",
        cfg: cfg.clone(),
    };
    let mut hook =
        |record: &EpochRecord, snap: &TrainerSnapshot| recorder.on_epoch(record, snap);
    let (state, log) = pretrain_unsupervised_with(
        &cohort,
        &cfg,
        TrainOptions {
            resume,
            on_epoch: Some(&mut hook),
            validation: None,
        },
    )?;
    for w in &log.warnings {
        eprintln!("fcadapt: warning: {w}");
    }
    save_final(&run, &state)?;
    Ok(())
}

fn cmd_train_source(args: &RunArgs, init: Option<&Path>) -> Result<()> {
    let config = load_config(args)?;
    let cfg = config.train_config()?;
    let manifest_path = config
        .paths
        .source_manifest
        .clone()
        .ok_or_else(|| Error::Config("train-source needs paths.source_manifest".into()))?;
    let manifest = read_manifest(&manifest_path)?;
    let cohort = load_cohort(&manifest)?;
    let mut train: Vec<RoiTimeseries> = Vec::new();
    let mut val: Vec<RoiTimeseries> = Vec::new();
    for (series, entry) in cohort.into_iter().zip(&manifest.entries) {
        match entry.split {
            SplitTag::SourceTrain => train.push(series),
            SplitTag::SourceVal => val.push(series),
            _ => {}
        }
    }
    if train.is_empty() {
        return Err(Error::Config("manifest has no source-train entries".into()));
    }
    let init_params = match init {
        None => None,
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            // A multi-branch pretraining checkpoint initializes the source
            // model with the branch-parameter average.
            Some(average_parameters(&ckpt.branches)?)
        }
    };
    eprintln!(
        "fcadapt: stage=train-source train={} val={} seed={}",
        train.len(),
        val.len(),
        cfg.seed
    );

    let mut run = open_stage(&config, "source")?;
    let resume = resume_state(&mut run, args.resume)?;
    let mut recorder = StageRecorder {
        run: &mut run,
        stage: "train-source",
        cfg: cfg.clone(),
    };
    let mut hook =
        |record: &EpochRecord, snap: &TrainerSnapshot| recorder.on_epoch(record, snap);
    let validation = if val.is_empty() { None } else { Some(val) };
    let (params, log) = train_source_with(
        &train,
        init_params,
        &cfg,
        TrainOptions {
            resume,
            on_epoch: Some(&mut hook),
            validation,
        },
    )?;
    for w in &log.warnings {
        eprintln!("fcadapt: warning: {w}");
    }
    save_final(&run, &MfeState::single(params, cfg.seed))?;
    Ok(())
}

fn cmd_adapt(args: &RunArgs, source: &Path, source_manifest: Option<&Path>) -> Result<()> {
    if source_manifest.is_some() {
        return Err(Error::Config(
            "source data forbidden in adaptation: remove --source-manifest".into(),
        ));
    }
    let config = load_config(args)?;
    if config.paths.source_manifest.is_some() {
        return Err(Error::Config(
            "source data forbidden in adaptation: remove paths.source_manifest from the config"
                .into(),
        ));
    }
    let cfg = config.train_config()?;
    let manifest_path = config
        .paths
        .target_manifest
        .clone()
        .ok_or_else(|| Error::Config("adapt needs paths.target_manifest".into()))?;
    let manifest = read_manifest(&manifest_path)?;
    let cohort = AuditedCohort::new(load_cohort(&manifest)?);

    let ckpt = load_checkpoint(source)?;
    let source_params = if ckpt.branches.len() == 1 {
        ckpt.branches.into_iter().next().expect("one branch")
    } else {
        average_parameters(&ckpt.branches)?
    };
    eprintln!(
        "fcadapt: stage=adapt target_subjects={} branches={} seed={}",
        cohort.len(),
        cfg.branch_kinds.len(),
        cfg.seed
    );

    let mut run = open_stage(&config, "adapt")?;
    let resume = resume_state(&mut run, args.resume)?;
    let mut recorder = StageRecorder {
        run: &mut run,
        stage: "adapt",
        cfg: cfg.clone(),
    };
    let mut hook =
        |record: &EpochRecord, snap: &TrainerSnapshot| recorder.on_epoch(record, snap);
    let (state, log) = adapt_target_with(
        &cohort,
        &source_params,
        &cfg,
        TrainOptions {
            resume,
            on_epoch: Some(&mut hook),
            validation: None,
        },
    )?;
    for w in &log.warnings {
        eprintln!("fcadapt: warning: {w}");
    }
    eprintln!("fcadapt: stage=adapt label_reads={}", cohort.label_reads());
    save_final(&run, &state)?;
    Ok(())
}

fn load_eval_inputs(
    config_path: &Path,
    checkpoint: &Path,
    manifest_override: Option<&Path>,
    run_dir: Option<&Path>,
) -> Result<(ExperimentConfig, MfeState, Vec<RoiTimeseries>)> {
    let mut config = ExperimentConfig::from_file(config_path)?;
    if let Some(dir) = run_dir {
        config.paths.run_dir = Some(dir.to_path_buf());
    }
    let manifest_path = manifest_override
        .map(Path::to_path_buf)
        .or_else(|| config.paths.eval_manifest.clone())
        .or_else(|| config.paths.target_manifest.clone())
        .ok_or_else(|| Error::Config("no eval manifest (flag or paths.eval_manifest)".into()))?;
    let manifest = read_manifest(&manifest_path)?;
    let ckpt = load_checkpoint(checkpoint)?;
    if ckpt.meta.n != manifest.roi_count {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects N={} ROIs, manifest has N={}",
            ckpt.meta.n, manifest.roi_count
        )));
    }
    let cohort = load_cohort(&manifest)?;
    if cohort.iter().any(|s| s.label.is_none()) {
        return Err(Error::Config(format!(
            "evaluation manifest '{}' has unlabeled entries",
            manifest_path.display()
        )));
    }
    let state = MfeState {
        branches: ckpt.branches,
        kinds: ckpt.meta.kinds,
        epoch: ckpt.meta.epoch,
        seed: ckpt.meta.seed,
    };
    Ok((config, state, cohort))
}

fn cmd_evaluate(
    config_path: &Path,
    checkpoint: &Path,
    manifest_override: Option<&Path>,
    run_dir: Option<&Path>,
) -> Result<()> {
    let (config, state, cohort) =
        load_eval_inputs(config_path, checkpoint, manifest_override, run_dir)?;
    let settings = config.train_config()?.encode_settings();
    let probs = predict_cohort(&cohort, &state, &settings, exec_of(&config))?;
    let predictions: Vec<Prediction> = cohort
        .iter()
        .zip(&probs)
        .map(|(s, &p)| (s.subject_id.clone(), p, s.label.expect("checked above")))
        .collect();
    let record = evaluate_cohort(&predictions, config.eval.threshold)?;
    let run = open_stage(&config, "eval")?;
    let paths = emit_report(&record, None, run.root())?;
    eprintln!(
        "fcadapt: stage=evaluate subjects={} report={}",
        cohort.len(),
        paths.record.display()
    );
    print!("{}", record.to_record_string());
    Ok(())
}

fn cmd_explain(
    config_path: &Path,
    checkpoint: &Path,
    manifest_override: Option<&Path>,
    k: Option<usize>,
    run_dir: Option<&Path>,
) -> Result<()> {
    let (config, state, cohort) =
        load_eval_inputs(config_path, checkpoint, manifest_override, run_dir)?;
    let settings = config.train_config()?.encode_settings();
    let k = k.unwrap_or(config.eval.top_k);
    let ranking = roi_importance(&state, &cohort, &settings, config.eval.threshold, k)?;
    let run = open_stage(&config, "explain")?;
    let mut out = String::new();
    for (rank, (roi, score)) in ranking.iter().enumerate() {
        out.push_str(&format!("{}\t{}\t{}\n", rank + 1, roi, score));
    }
    crate::data::write_atomic(&run.root().join("roi_ranking.tsv"), out.as_bytes())?;
    eprintln!(
        "fcadapt: stage=explain rois={} file={}",
        ranking.len(),
        run.root().join("roi_ranking.tsv").display()
    );
    print!("{out}");
    Ok(())
}

fn exec_of(config: &ExperimentConfig) -> ExecMode {
    config.exec_mode()
}
