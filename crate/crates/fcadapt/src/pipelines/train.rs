//! Trainer core shared by pretraining, source training, and adaptation.
//!
//! Each step fans the batch out per subject (forward + backward on a
//! private tape), then reduces gradients in input order and applies one
//! Adam update over the concatenated branch parameters. Randomness is
//! derived from `(seed, counters)` so a resumed run replays exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::RoiTimeseries;
use crate::encoder::{
    encode_subject_on_tape, EncoderParams, NormMode, NormObservation, ParamVars,
};
use crate::enrichment::{build_graph_sequence, BranchKind, Enrichment, scaled_len};
use crate::error::{Error, Result};
use crate::exec::map_indices;
use crate::objectives::{subject_bce_on_tape, subject_consistency_on_tape};
use crate::pipelines::{MfeState, TrainConfig};
use crate::tape::Tape;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adaptive-moment optimizer state over one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grads[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// One line of `metrics.log`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over the epoch's samples.
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

/// State needed to continue an interrupted run.
#[derive(Debug, Clone)]
pub struct ResumeState {
    pub branches: Vec<EncoderParams>,
    pub kinds: Vec<Option<BranchKind>>,
    pub adam: Adam,
    /// Epochs already completed.
    pub epoch: usize,
}

/// Read-only view of the trainer handed to the per-epoch hook.
pub struct TrainerSnapshot<'a> {
    pub branches: &'a [EncoderParams],
    pub kinds: &'a [Option<BranchKind>],
    /// Epochs completed, including the one just finished.
    pub epoch: usize,
    pub adam: &'a Adam,
    pub seed: u64,
}

/// Optional hooks and resume state for a training run.
#[derive(Default)]
pub struct TrainOptions<'h> {
    pub resume: Option<ResumeState>,
    #[allow(clippy::type_complexity)]
    pub on_epoch: Option<&'h mut dyn FnMut(&EpochRecord, &TrainerSnapshot) -> Result<()>>,
    /// Labeled series evaluated after each epoch (source training only).
    pub validation: Option<Vec<RoiTimeseries>>,
}

pub(super) enum Objective<'a> {
    /// Single plain-view branch, binary cross-entropy against these labels
    /// (one per subject, in subject order).
    SourceBce { labels: &'a [bool] },
    /// All branches, mutual-consistency loss, labels untouched.
    Consistency,
}

/// splitmix64-derived stream seed; decorrelates per-counter RNGs.
pub(super) fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        z ^= p.wrapping_mul(0xff51_afd7_ed55_8ccd).rotate_left(31);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

fn derive_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}

/// Per-step enrichment draw for one branch; the slice start is resolved
/// per subject because series lengths differ.
#[derive(Debug, Clone, Copy)]
enum StepDraw {
    Fixed(Enrichment),
    SliceWithRatio(f64),
}

impl StepDraw {
    fn resolve(self, series_len: usize, rng: &mut ChaCha8Rng) -> Enrichment {
        match self {
            StepDraw::Fixed(e) => e,
            StepDraw::SliceWithRatio(gamma) => {
                let slice_len = scaled_len(series_len, gamma);
                let max_start = series_len.saturating_sub(slice_len);
                let start = if max_start == 0 { 0 } else { rng.gen_range(0..=max_start) };
                Enrichment::Slice { gamma, start }
            }
        }
    }
}

fn draw_step_enrichments(
    kinds: &[Option<BranchKind>],
    cfg: &TrainConfig,
    epoch: usize,
    step: usize,
) -> Vec<StepDraw> {
    kinds
        .iter()
        .enumerate()
        .map(|(b, kind)| match kind {
            None => StepDraw::Fixed(Enrichment::None),
            Some(k) => {
                let mut rng =
                    derive_rng(cfg.seed, &[3, epoch as u64, step as u64, b as u64]);
                let sets = &cfg.enrichment;
                match k {
                    BranchKind::Warp => StepDraw::Fixed(Enrichment::Warp {
                        alpha: sets.warp_ratios[rng.gen_range(0..sets.warp_ratios.len())],
                    }),
                    BranchKind::ReceptiveField => StepDraw::Fixed(Enrichment::ReceptiveField {
                        beta: sets.window_sizes[rng.gen_range(0..sets.window_sizes.len())],
                    }),
                    BranchKind::Slice => StepDraw::SliceWithRatio(
                        sets.slice_ratios[rng.gen_range(0..sets.slice_ratios.len())],
                    ),
                }
            }
        })
        .collect()
}

struct SubjectStep {
    loss: f64,
    grads: Vec<f64>,
    norm_obs: Vec<Vec<NormObservation>>,
}

/// The shared training loop. Returns the final state and per-epoch log.
pub(super) fn run(
    subjects: &[RoiTimeseries],
    branches: Vec<EncoderParams>,
    kinds: Vec<Option<BranchKind>>,
    objective: Objective<'_>,
    cfg: &TrainConfig,
    mut options: TrainOptions<'_>,
) -> Result<(MfeState, TrainLog)> {
    if subjects.is_empty() {
        return Err(Error::Config("empty cohort".into()));
    }
    if matches!(objective, Objective::Consistency) && branches.len() < 2 && cfg.epochs > 0 {
        return Err(Error::Config("consistency training needs at least 2 branches".into()));
    }

    let mut branches = branches;
    let mut kinds = kinds;
    let per_branch: Vec<usize> = branches.iter().map(|b| b.trainable_len()).collect();
    let total_len: usize = per_branch.iter().sum();
    let mut adam = Adam::new(total_len);
    let mut start_epoch = 0usize;
    if let Some(resume) = options.resume.take() {
        if resume.branches.len() != branches.len() {
            return Err(Error::Checkpoint(format!(
                "resume checkpoint has {} branches, run needs {}",
                resume.branches.len(),
                branches.len()
            )));
        }
        if resume.adam.m.len() != total_len {
            return Err(Error::Checkpoint("resume optimizer state length mismatch".into()));
        }
        branches = resume.branches;
        kinds = resume.kinds;
        adam = resume.adam;
        start_epoch = resume.epoch;
    }

    let mut log = TrainLog::default();
    for epoch in start_epoch..cfg.epochs {
        let lr = super::lr_at(epoch, cfg);

        // Deterministic per-epoch shuffle of subject indices.
        let mut order: Vec<usize> = (0..subjects.len()).collect();
        let mut rng = derive_rng(cfg.seed, &[4, epoch as u64]);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }

        let mut epoch_loss_sum = 0.0f64;
        let mut epoch_samples = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let draws = draw_step_enrichments(&kinds, cfg, epoch, step);
            let results: Vec<Result<SubjectStep>> =
                map_indices(batch.len(), cfg.exec, |pos| {
                    let subject_idx = batch[pos];
                    subject_step(
                        &subjects[subject_idx],
                        subject_idx,
                        &branches,
                        &draws,
                        &objective,
                        cfg,
                        epoch,
                        step,
                    )
                });

            // Ordered reduction keeps results identical across thread
            // counts.
            let mut grads = vec![0.0f64; total_len];
            let mut obs_acc: Vec<Vec<(Vec<f64>, Vec<f64>, usize)>> =
                vec![vec![]; branches.len()];
            let mut batch_loss = 0.0f64;
            for result in results {
                let step_out = result?;
                batch_loss += step_out.loss;
                for (g, s) in grads.iter_mut().zip(&step_out.grads) {
                    *g += s;
                }
                for (b, obs) in step_out.norm_obs.iter().enumerate() {
                    accumulate_norm_obs(&mut obs_acc[b], obs);
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grads {
                *g *= inv;
            }
            batch_loss *= inv;
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, step {step}"
                )));
            }
            epoch_loss_sum += batch_loss * batch.len() as f64;
            epoch_samples += batch.len();

            // One Adam update over the concatenated branch parameters.
            let mut flat: Vec<f64> = Vec::with_capacity(total_len);
            for b in &branches {
                flat.extend(b.trainable_vec());
            }
            adam.step(&mut flat, &grads, lr);
            let mut offset = 0;
            for (b, len) in branches.iter_mut().zip(&per_branch) {
                b.set_trainable(&flat[offset..offset + len]);
                offset += len;
            }

            if !cfg.freeze_norm_stats {
                for (b, acc) in branches.iter_mut().zip(&obs_acc) {
                    for (site, (mean_sum, var_sum, count)) in acc.iter().enumerate() {
                        if *count == 0 {
                            continue;
                        }
                        let inv = 1.0 / *count as f64;
                        let mean: Vec<f64> = mean_sum.iter().map(|v| v * inv).collect();
                        let var: Vec<f64> = var_sum.iter().map(|v| v * inv).collect();
                        b.update_running_stats(site, &mean, &var);
                    }
                }
            }

            for b in &branches {
                if !b.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite parameters after epoch {epoch}, step {step}"
                    )));
                }
            }
        }

        let mut record = EpochRecord {
            epoch,
            lr,
            loss: epoch_loss_sum / epoch_samples as f64,
            val_auc: None,
            val_acc: None,
        };
        if let Some(val) = &options.validation {
            let (auc, acc) = validation_metrics(val, &branches, &kinds, cfg)?;
            record.val_auc = auc;
            record.val_acc = acc;
        }
        if let Some(hook) = options.on_epoch.as_deref_mut() {
            hook(
                &record,
                &TrainerSnapshot {
                    branches: &branches,
                    kinds: &kinds,
                    epoch: epoch + 1,
                    adam: &adam,
                    seed: cfg.seed,
                },
            )?;
        }
        log.epochs.push(record);
    }

    Ok((
        MfeState {
            branches,
            kinds,
            epoch: cfg.epochs,
            seed: cfg.seed,
        },
        log,
    ))
}

fn accumulate_norm_obs(
    acc: &mut Vec<(Vec<f64>, Vec<f64>, usize)>,
    obs: &[NormObservation],
) {
    for o in obs {
        while acc.len() <= o.site {
            acc.push((vec![], vec![], 0));
        }
        let slot = &mut acc[o.site];
        if slot.2 == 0 {
            slot.0 = vec![0.0; o.mean.len()];
            slot.1 = vec![0.0; o.var.len()];
        }
        for (a, b) in slot.0.iter_mut().zip(&o.mean) {
            *a += b;
        }
        for (a, b) in slot.1.iter_mut().zip(&o.var) {
            *a += b;
        }
        slot.2 += 1;
    }
}

#[allow(clippy::too_many_arguments)]
fn subject_step(
    subject: &RoiTimeseries,
    subject_idx: usize,
    branches: &[EncoderParams],
    draws: &[StepDraw],
    objective: &Objective<'_>,
    cfg: &TrainConfig,
    epoch: usize,
    step: usize,
) -> Result<SubjectStep> {
    let mut tape = Tape::new();
    let vars: Vec<ParamVars> = branches
        .iter()
        .map(|b| ParamVars::insert(&mut tape, b))
        .collect();

    let mut features = Vec::with_capacity(branches.len());
    let mut logits = Vec::with_capacity(branches.len());
    let mut norm_obs = Vec::with_capacity(branches.len());
    for (b, (params, draw)) in branches.iter().zip(draws).enumerate() {
        let mut rng = derive_rng(
            cfg.seed,
            &[5, epoch as u64, step as u64, b as u64, subject_idx as u64],
        );
        let enrichment = draw.resolve(subject.len(), &mut rng);
        let graphs = build_graph_sequence(subject, &enrichment, &cfg.window, &cfg.graph)?;
        let encoded =
            encode_subject_on_tape(&mut tape, params, &vars[b], &graphs, NormMode::Batch)?;
        features.push(encoded.features);
        logits.push(encoded.logit);
        norm_obs.push(encoded.norm_obs);
    }

    let loss_var = match objective {
        Objective::SourceBce { labels } => {
            subject_bce_on_tape(&mut tape, logits[0], labels[subject_idx])
        }
        Objective::Consistency => subject_consistency_on_tape(&mut tape, &features, &logits),
    };
    let loss = tape.scalar(loss_var);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss for subject '{}'",
            subject.subject_id
        )));
    }
    let grads = tape.backward(loss_var);
    let mut flat = Vec::new();
    for v in &vars {
        flat.extend(v.grad_vec(&grads));
    }
    Ok(SubjectStep {
        loss,
        grads: flat,
        norm_obs: norm_obs
            .into_iter()
            .map(|obs| collapse_window_obs(obs))
            .collect(),
    })
}

/// Per-window observations of one subject collapse to per-site means so
/// each subject contributes one observation per site.
fn collapse_window_obs(obs: Vec<NormObservation>) -> Vec<NormObservation> {
    let mut acc: Vec<(Vec<f64>, Vec<f64>, usize)> = Vec::new();
    accumulate_norm_obs(&mut acc, &obs);
    acc.into_iter()
        .enumerate()
        .filter(|(_, (_, _, count))| *count > 0)
        .map(|(site, (mean_sum, var_sum, count))| {
            let inv = 1.0 / count as f64;
            NormObservation {
                site,
                mean: mean_sum.iter().map(|v| v * inv).collect(),
                var: var_sum.iter().map(|v| v * inv).collect(),
            }
        })
        .collect()
}

fn validation_metrics(
    val: &[RoiTimeseries],
    branches: &[EncoderParams],
    kinds: &[Option<BranchKind>],
    cfg: &TrainConfig,
) -> Result<(Option<f64>, Option<f64>)> {
    let state = MfeState {
        branches: branches.to_vec(),
        kinds: kinds.to_vec(),
        epoch: 0,
        seed: cfg.seed,
    };
    let settings = cfg.encode_settings();
    let probs = super::predict_cohort(val, &state, &settings, cfg.exec)?;
    let mut predictions = Vec::with_capacity(val.len());
    for (s, p) in val.iter().zip(probs) {
        let label = s.label.ok_or_else(|| {
            Error::Config(format!("unlabeled validation entry '{}'", s.subject_id))
        })?;
        predictions.push((s.subject_id.clone(), p, label));
    }
    match crate::evaluation::evaluate_cohort(&predictions, 0.5) {
        Ok(record) => Ok((record.auc, record.acc)),
        Err(_) => Ok((None, None)),
    }
}
