//! Cohort data model and file I/O.
//!
//! A cohort is described by a manifest (one record per subject) plus one
//! matrix file per subject holding the `L x N` ROI time series. Both formats
//! are line-oriented text so they diff cleanly and can be produced by any
//! language.
//!
//! Matrix file: a header `#roi_timeseries v1 L=<L> N=<N>` followed by `L`
//! rows of `N` tab-separated values. Values are written with the shortest
//! representation that round-trips `f64` exactly.
//!
//! Manifest file: a magic line, `#key=value` header lines, then one
//! tab-separated record per subject: `subject_id<TAB>path<TAB>label|-<TAB>split`.
//! Paths are relative to the manifest's directory.

pub mod synth;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;

pub use synth::{generate_synthetic_cohort, DomainShift, SyntheticCohort, SyntheticSpec};

const MATRIX_MAGIC: &str = "#roi_timeseries v1";
const MANIFEST_MAGIC: &str = "#cohort_manifest v1";

/// One subject's ROI time series: `L` time points by `N` regions.
///
/// Loaded series are z-scored per column; columns that were constant in the
/// raw file are set to zero and listed in `constant_rois`.
#[derive(Debug, Clone)]
pub struct RoiTimeseries {
    pub subject_id: String,
    pub values: Mat,
    /// `true` = patient, `false` = control.
    pub label: Option<bool>,
    pub constant_rois: Vec<usize>,
}

impl RoiTimeseries {
    /// Validates shape and finiteness. Does not normalize.
    pub fn new(subject_id: impl Into<String>, values: Mat, label: Option<bool>) -> Result<Self> {
        let subject_id = subject_id.into();
        if values.rows() < 2 || values.cols() < 2 {
            return Err(Error::Contract(format!(
                "series '{}' must be at least 2 x 2, got {} x {}",
                subject_id,
                values.rows(),
                values.cols()
            )));
        }
        for r in 0..values.rows() {
            for c in 0..values.cols() {
                if !values[(r, c)].is_finite() {
                    return Err(Error::NonFinite {
                        subject: subject_id,
                        row: r,
                        col: c,
                    });
                }
            }
        }
        Ok(RoiTimeseries {
            subject_id,
            values,
            label,
            constant_rois: Vec::new(),
        })
    }

    /// Number of time points `L`.
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    /// Number of ROIs `N`.
    pub fn rois(&self) -> usize {
        self.values.cols()
    }

    /// Z-scores every column in place (zero mean, unit variance). Constant
    /// columns become all-zero and are recorded in `constant_rois`.
    pub fn normalize(&mut self) {
        let (l, n) = self.values.shape();
        let mut constant = Vec::new();
        for c in 0..n {
            let mean: f64 = (0..l).map(|r| self.values[(r, c)]).sum::<f64>() / l as f64;
            let var: f64 =
                (0..l).map(|r| (self.values[(r, c)] - mean).powi(2)).sum::<f64>() / l as f64;
            let scale: f64 = (0..l).fold(0.0_f64, |m, r| m.max(self.values[(r, c)].abs()));
            // Relative tolerance so sums of identical values that are not
            // exactly representable still count as constant.
            if var.sqrt() <= f64::EPSILON * (l as f64) * (scale + 1.0) {
                for r in 0..l {
                    self.values[(r, c)] = 0.0;
                }
                constant.push(c);
            } else {
                let sd = var.sqrt();
                for r in 0..l {
                    self.values[(r, c)] = (self.values[(r, c)] - mean) / sd;
                }
            }
        }
        // Keep flags from earlier normalizations.
        let mut all: BTreeSet<usize> = self.constant_rois.iter().copied().collect();
        all.extend(constant);
        self.constant_rois = all.into_iter().collect();
    }
}

/// Where a subject participates in the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitTag {
    SourceTrain,
    SourceVal,
    Target,
    Auxiliary,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::SourceTrain => "source-train",
            SplitTag::SourceVal => "source-val",
            SplitTag::Target => "target",
            SplitTag::Auxiliary => "auxiliary",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source-train" => Ok(SplitTag::SourceTrain),
            "source-val" => Ok(SplitTag::SourceVal),
            "target" => Ok(SplitTag::Target),
            "auxiliary" => Ok(SplitTag::Auxiliary),
            other => Err(Error::Schema(format!("unknown split tag '{other}'"))),
        }
    }

    /// Splits whose entries must carry labels.
    pub fn requires_label(self) -> bool {
        matches!(self, SplitTag::SourceTrain | SplitTag::SourceVal)
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub path: PathBuf,
    pub label: Option<bool>,
    pub split: SplitTag,
}

/// Subject list driving a pipeline. `base_dir` anchors the relative entry
/// paths and is set when the manifest is read from disk.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub roi_count: usize,
    pub schema_version: u32,
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, roi_count: usize) -> Self {
        DatasetManifest {
            entries,
            roi_count,
            schema_version: 1,
            base_dir: PathBuf::from("."),
        }
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(MANIFEST_MAGIC);
        out.push('\n');
        out.push_str(&format!("#roi_count={}\n", self.roi_count));
        out.push_str(&format!("#schema_version={}\n", self.schema_version));
        for e in &self.entries {
            let label = match e.label {
                Some(true) => "1",
                Some(false) => "0",
                None => "-",
            };
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.subject_id,
                e.path.display(),
                label,
                e.split
            ));
        }
        write_atomic(path, out.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(line) if line == MANIFEST_MAGIC => {}
            other => {
                return Err(Error::Schema(format!(
                    "'{}' is not a cohort manifest (first line {:?})",
                    path.display(),
                    other
                )))
            }
        }
        let mut roi_count = None;
        let mut schema_version = 1;
        let mut entries = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('#') {
                if let Some((key, value)) = header.split_once('=') {
                    match key {
                        "roi_count" => {
                            roi_count = Some(value.parse::<usize>().map_err(|_| {
                                Error::Schema(format!("bad roi_count '{value}'"))
                            })?)
                        }
                        "schema_version" => {
                            schema_version = value.parse::<u32>().map_err(|_| {
                                Error::Schema(format!("bad schema_version '{value}'"))
                            })?
                        }
                        _ => {}
                    }
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Schema(format!(
                    "manifest record needs 4 tab-separated fields, got {}: '{line}'",
                    fields.len()
                )));
            }
            let label = match fields[2] {
                "-" => None,
                "0" => Some(false),
                "1" => Some(true),
                other => {
                    return Err(Error::Schema(format!("bad label field '{other}'")));
                }
            };
            entries.push(ManifestEntry {
                subject_id: fields[0].to_string(),
                path: PathBuf::from(fields[1]),
                label,
                split: SplitTag::parse(fields[3])?,
            });
        }
        let roi_count =
            roi_count.ok_or_else(|| Error::Schema("manifest missing roi_count header".into()))?;
        let base_dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        Ok(DatasetManifest {
            entries,
            roi_count,
            schema_version,
            base_dir,
        })
    }

    /// Entries restricted to one split.
    pub fn split(&self, tag: SplitTag) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == tag).collect()
    }

    /// Drops entries whose series has fewer than `min_len` time points.
    /// Reads only matrix headers.
    pub fn filter_min_length(&self, min_len: usize) -> Result<DatasetManifest> {
        let mut kept = Vec::new();
        for e in &self.entries {
            let (l, _) = read_matrix_header(&self.resolve(e))?;
            if l >= min_len {
                kept.push(e.clone());
            }
        }
        Ok(DatasetManifest {
            entries: kept,
            roi_count: self.roi_count,
            schema_version: self.schema_version,
            base_dir: self.base_dir.clone(),
        })
    }
}

/// Per-entry validation outcome; `problems` is empty when the entry is fine.
#[derive(Debug, Clone)]
pub struct EntryStatus {
    pub subject_id: String,
    pub problems: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub entries: Vec<EntryStatus>,
    pub cohort_problems: Vec<String>,
    pub ok: bool,
}

impl ValidationReport {
    pub fn problems(&self) -> impl Iterator<Item = &String> {
        self.cohort_problems
            .iter()
            .chain(self.entries.iter().flat_map(|e| e.problems.iter()))
    }
}

/// Checks manifest invariants without loading full matrices. Problems are
/// reported, never raised.
pub fn validate_manifest(manifest: &DatasetManifest) -> ValidationReport {
    let mut cohort_problems = Vec::new();
    if manifest.entries.is_empty() {
        cohort_problems.push("empty cohort".to_string());
    }
    let mut seen = BTreeSet::new();
    let mut entries = Vec::new();
    for e in &manifest.entries {
        let mut problems = Vec::new();
        if !seen.insert(e.subject_id.clone()) {
            problems.push(format!("duplicate subject_id '{}'", e.subject_id));
        }
        if e.split.requires_label() && e.label.is_none() {
            problems.push(format!("label required for split '{}'", e.split));
        }
        let path = manifest.resolve(e);
        if !path.is_file() {
            problems.push(format!("missing file '{}'", path.display()));
        } else {
            match read_matrix_header(&path) {
                Ok((_, n)) if n != manifest.roi_count => {
                    problems.push(format!(
                        "roi count mismatch: file has {}, manifest says {}",
                        n, manifest.roi_count
                    ));
                }
                Ok(_) => {}
                Err(err) => problems.push(format!("unreadable header: {err}")),
            }
        }
        entries.push(EntryStatus {
            subject_id: e.subject_id.clone(),
            problems,
        });
    }
    let ok = cohort_problems.is_empty() && entries.iter().all(|e| e.problems.is_empty());
    ValidationReport {
        entries,
        cohort_problems,
        ok,
    }
}

/// Loads every subject in manifest order, z-scoring columns at load time.
pub fn load_cohort(manifest: &DatasetManifest) -> Result<Vec<RoiTimeseries>> {
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let path = manifest.resolve(e);
        let values = read_matrix_for(&path, &e.subject_id)?;
        if values.cols() != manifest.roi_count {
            return Err(Error::Schema(format!(
                "subject '{}' has {} ROIs, manifest says {}",
                e.subject_id,
                values.cols(),
                manifest.roi_count
            )));
        }
        let mut series = RoiTimeseries::new(e.subject_id.clone(), values, e.label)?;
        series.normalize();
        out.push(series);
    }
    Ok(out)
}

/// Writes an `L x N` matrix in the versioned text format.
pub fn write_matrix(path: &Path, values: &Mat) -> Result<()> {
    let mut out = String::with_capacity(values.rows() * values.cols() * 20);
    out.push_str(&format!(
        "{} L={} N={}\n",
        MATRIX_MAGIC,
        values.rows(),
        values.cols()
    ));
    for r in 0..values.rows() {
        for c in 0..values.cols() {
            if c > 0 {
                out.push('\t');
            }
            out.push_str(&format!("{}", values[(r, c)]));
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

fn parse_header(line: &str, path: &Path) -> Result<(usize, usize)> {
    let rest = line.strip_prefix(MATRIX_MAGIC).ok_or_else(|| {
        Error::Schema(format!("'{}' is not a matrix file", path.display()))
    })?;
    let mut l = None;
    let mut n = None;
    for token in rest.split_whitespace() {
        if let Some(v) = token.strip_prefix("L=") {
            l = v.parse().ok();
        } else if let Some(v) = token.strip_prefix("N=") {
            n = v.parse().ok();
        }
    }
    match (l, n) {
        (Some(l), Some(n)) => Ok((l, n)),
        _ => Err(Error::Schema(format!(
            "bad matrix header in '{}': '{line}'",
            path.display()
        ))),
    }
}

/// Reads only `(L, N)` from a matrix file header.
pub fn read_matrix_header(path: &Path) -> Result<(usize, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let first = text
        .lines()
        .next()
        .ok_or_else(|| Error::Schema(format!("empty matrix file '{}'", path.display())))?;
    parse_header(first, path)
}

/// Reads a full matrix, checking it against its own header.
pub fn read_matrix(path: &Path) -> Result<Mat> {
    read_matrix_for(path, &path.display().to_string())
}

fn read_matrix_for(path: &Path, subject: &str) -> Result<Mat> {
    let text = fs::read_to_string(path).map_err(|e| Error::Load {
        subject: subject.to_string(),
        source: e,
    })?;
    let mut lines = text.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Schema(format!("empty matrix file '{}'", path.display())))?;
    let (l, n) = parse_header(first, path)?;
    let mut data = Vec::with_capacity(l * n);
    let mut rows = 0usize;
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let mut cols = 0usize;
        for field in line.split_whitespace() {
            let value: f64 = field.parse().map_err(|_| {
                Error::Schema(format!(
                    "bad number '{}' at row {rows} in '{}'",
                    field,
                    path.display()
                ))
            })?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    subject: subject.to_string(),
                    row: rows,
                    col: cols,
                });
            }
            data.push(value);
            cols += 1;
        }
        if cols != n {
            return Err(Error::Schema(format!(
                "row {rows} in '{}' has {cols} columns, header says {n}",
                path.display()
            )));
        }
        rows += 1;
    }
    if rows != l {
        return Err(Error::Schema(format!(
            "'{}' has {rows} rows, header says {l}",
            path.display()
        )));
    }
    Ok(Mat::from_vec(l, n, data))
}

/// Writes to a temp file in the same directory, then renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp~");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().ok();
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
