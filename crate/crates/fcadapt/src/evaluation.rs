//! Classification metrics, rank-based AUC, ROI-importance ranking, and
//! report files.
//!
//! Ratios with a zero denominator are reported as undefined (`None`,
//! rendered `n/a`), never as NaN.

use std::path::{Path, PathBuf};

use crate::data::{write_atomic, RoiTimeseries};
use crate::error::{Error, Result};
use crate::pipelines::{ensemble_outputs, EncodeSettings, MfeState};
use crate::tape::sigmoid;

/// Binary confusion counts at a fixed threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// The six metrics, with undefined entries kept as `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub auc: Option<f64>,
    pub acc: Option<f64>,
    pub f1: Option<f64>,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub pre: Option<f64>,
    pub threshold: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

/// ACC, F1, SEN, SPE, PRE from confusion counts (AUC stays unset).
pub fn confusion_metrics(counts: &ConfusionCounts) -> MetricsRecord {
    let c = counts;
    MetricsRecord {
        auc: None,
        acc: ratio(c.tp + c.tn, c.total()),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        sen: ratio(c.tp, c.tp + c.fn_),
        spe: ratio(c.tn, c.tn + c.fp),
        pre: ratio(c.tp, c.tp + c.fp),
        threshold: 0.5,
        n_pos: (c.tp + c.fn_) as usize,
        n_neg: (c.tn + c.fp) as usize,
    }
}

/// Mann-Whitney AUC: the probability that a positive score outranks a
/// negative one, ties counting half. Computed via midranks in
/// O((n_pos + n_neg) log(...)), which is exactly the pair-counting value.
pub fn auc_rank(scores_pos: &[f64], scores_neg: &[f64]) -> Result<f64> {
    if scores_pos.is_empty() || scores_neg.is_empty() {
        return Err(Error::Contract("undefined AUC: one class has no scores".into()));
    }
    if scores_pos.iter().chain(scores_neg).any(|s| !s.is_finite()) {
        return Err(Error::Contract("undefined AUC: non-finite score".into()));
    }
    let n_pos = scores_pos.len();
    let n_neg = scores_neg.len();
    let mut all: Vec<(f64, bool)> = scores_pos
        .iter()
        .map(|&s| (s, true))
        .chain(scores_neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Midranks over tie groups; sum of positive ranks gives the U statistic.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        let pos_in_group = all[i..j].iter().filter(|(_, p)| *p).count() as f64;
        rank_sum_pos += midrank * pos_in_group;
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// One scored subject: id, predicted probability, true label.
pub type Prediction = (String, f64, bool);

/// Thresholds probabilities (`>=` counts positive), fills all six metrics.
pub fn evaluate_cohort(predictions: &[Prediction], threshold: f64) -> Result<MetricsRecord> {
    if predictions.is_empty() {
        return Err(Error::Contract("evaluate_cohort needs at least one prediction".into()));
    }
    let mut counts = ConfusionCounts {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (id, p, label) in predictions {
        if !(0.0..=1.0).contains(p) {
            return Err(Error::Contract(format!(
                "probability {p} for '{id}' outside [0, 1]"
            )));
        }
        let predicted_pos = *p >= threshold;
        match (label, predicted_pos) {
            (true, true) => counts.tp += 1,
            (true, false) => counts.fn_ += 1,
            (false, true) => counts.fp += 1,
            (false, false) => counts.tn += 1,
        }
        if *label {
            pos.push(*p);
        } else {
            neg.push(*p);
        }
    }
    let mut record = confusion_metrics(&counts);
    record.threshold = threshold;
    record.auc = if pos.is_empty() || neg.is_empty() {
        None
    } else {
        Some(auc_rank(&pos, &neg)?)
    };
    Ok(record)
}

/// Ranked `(roi_index, mean_attention)` pairs, strongest first, ties broken
/// by ascending index.
pub fn rank_rois(mean_scores: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = mean_scores.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k.min(mean_scores.len()));
    ranked
}

/// Top-`k` ROIs by mean attention over correctly-classified positive
/// subjects, with the per-subject attention averaged across branches.
///
/// Labels here are evaluation inputs; adaptation itself never sees them.
pub fn roi_importance(
    state: &MfeState,
    cohort: &[RoiTimeseries],
    settings: &EncodeSettings,
    threshold: f64,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    if cohort.is_empty() {
        return Err(Error::Contract("roi_importance needs a non-empty cohort".into()));
    }
    let mut sums: Vec<f64> = Vec::new();
    let mut selected = 0usize;
    for subject in cohort {
        let label = subject.label.ok_or_else(|| {
            Error::Contract(format!("unlabeled subject '{}'", subject.subject_id))
        })?;
        if !label {
            continue;
        }
        let outputs = ensemble_outputs(subject, state, settings)?;
        let prob =
            outputs.iter().map(|o| sigmoid(o.logit)).sum::<f64>() / outputs.len() as f64;
        if prob < threshold {
            continue;
        }
        let n = outputs[0].attention.len();
        if sums.is_empty() {
            sums = vec![0.0; n];
        }
        for o in &outputs {
            for (acc, &a) in sums.iter_mut().zip(&o.attention) {
                *acc += a / outputs.len() as f64;
            }
        }
        selected += 1;
    }
    if selected == 0 {
        return Err(Error::Contract(
            "empty selection: no correctly-classified positive subjects".into(),
        ));
    }
    for v in &mut sums {
        *v /= selected as f64;
    }
    Ok(rank_rois(&sums, k))
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "n/a".to_string(),
    }
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s == "n/a" {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Schema(format!("bad metric value '{s}'")))
}

impl MetricsRecord {
    /// Machine-readable `key=value` lines in a fixed key order.
    pub fn to_record_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("auc={}\n", fmt_opt(self.auc)));
        out.push_str(&format!("acc={}\n", fmt_opt(self.acc)));
        out.push_str(&format!("f1={}\n", fmt_opt(self.f1)));
        out.push_str(&format!("sen={}\n", fmt_opt(self.sen)));
        out.push_str(&format!("spe={}\n", fmt_opt(self.spe)));
        out.push_str(&format!("pre={}\n", fmt_opt(self.pre)));
        out.push_str(&format!("n_pos={}\n", self.n_pos));
        out.push_str(&format!("n_neg={}\n", self.n_neg));
        out.push_str(&format!("threshold={}\n", self.threshold));
        out
    }

    pub fn parse_record(text: &str) -> Result<MetricsRecord> {
        let mut record = MetricsRecord {
            auc: None,
            acc: None,
            f1: None,
            sen: None,
            spe: None,
            pre: None,
            threshold: 0.5,
            n_pos: 0,
            n_neg: 0,
        };
        for line in text.lines() {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Schema(format!("bad metrics line '{line}'")))?;
            match key {
                "auc" => record.auc = parse_opt(value)?,
                "acc" => record.acc = parse_opt(value)?,
                "f1" => record.f1 = parse_opt(value)?,
                "sen" => record.sen = parse_opt(value)?,
                "spe" => record.spe = parse_opt(value)?,
                "pre" => record.pre = parse_opt(value)?,
                "n_pos" => {
                    record.n_pos = value
                        .parse()
                        .map_err(|_| Error::Schema(format!("bad n_pos '{value}'")))?
                }
                "n_neg" => {
                    record.n_neg = value
                        .parse()
                        .map_err(|_| Error::Schema(format!("bad n_neg '{value}'")))?
                }
                "threshold" => {
                    record.threshold = value
                        .parse()
                        .map_err(|_| Error::Schema(format!("bad threshold '{value}'")))?
                }
                other => return Err(Error::Schema(format!("unknown metrics key '{other}'"))),
            }
        }
        Ok(record)
    }

    /// Human-readable aligned table.
    pub fn to_table_string(&self) -> String {
        let row = |name: &str, v: Option<f64>| match v {
            Some(x) => format!("  {name:<12}{x:>10.4}\n"),
            None => format!("  {name:<12}{:>10}\n", "n/a"),
        };
        let mut out = String::new();
        out.push_str(&format!(
            "classification metrics (threshold {:.2}, {} positive / {} negative)\n",
            self.threshold, self.n_pos, self.n_neg
        ));
        out.push_str(&row("AUC", self.auc));
        out.push_str(&row("ACC", self.acc));
        out.push_str(&row("F1", self.f1));
        out.push_str(&row("SEN", self.sen));
        out.push_str(&row("SPE", self.spe));
        out.push_str(&row("PRE", self.pre));
        out
    }
}

/// Files written by [`emit_report`].
#[derive(Debug, Clone)]
pub struct ReportPaths {
    pub record: PathBuf,
    pub table: PathBuf,
    pub roi_ranking: Option<PathBuf>,
}

/// Writes the machine-readable record, the formatted table, and (when a
/// ranking is given) the `rank<TAB>roi_index<TAB>score` file.
pub fn emit_report(
    record: &MetricsRecord,
    roi_ranking: Option<&[(usize, f64)]>,
    dest_dir: &Path,
) -> Result<ReportPaths> {
    let record_path = dest_dir.join("metrics.record");
    write_atomic(&record_path, record.to_record_string().as_bytes())?;
    let table_path = dest_dir.join("metrics.txt");
    write_atomic(&table_path, record.to_table_string().as_bytes())?;
    let roi_path = match roi_ranking {
        None => None,
        Some(ranking) => {
            let mut out = String::new();
            for (rank, (roi, score)) in ranking.iter().enumerate() {
                out.push_str(&format!("{}\t{}\t{}\n", rank + 1, roi, score));
            }
            let path = dest_dir.join("roi_ranking.tsv");
            write_atomic(&path, out.as_bytes())?;
            Some(path)
        }
    };
    Ok(ReportPaths {
        record: record_path,
        table: table_path,
        roi_ranking: roi_path,
    })
}
