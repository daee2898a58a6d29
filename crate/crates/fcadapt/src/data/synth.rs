//! Synthetic two-domain cohort generator.
//!
//! Class-1 ("patient") subjects share a smooth latent signal across the
//! planted ROI block, which raises within-block correlation; class-0
//! subjects are pure noise. Target-domain subjects additionally pass
//! through a domain shift: the clean part is amplitude-scaled and
//! Fourier-resampled to a new length, and the noise floor is rescaled.
//! Everything is a pure function of the spec, so identical specs produce
//! byte-identical files.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{write_matrix, DatasetManifest, ManifestEntry, SplitTag};
use crate::enrichment::fourier_resample;
use crate::error::{Error, Result};
use crate::mat::Mat;

/// How the target domain differs from the source domain.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DomainShift {
    /// Target series length is `round(resample_ratio * L)`.
    pub resample_ratio: f64,
    /// Target noise sigma is `noise_multiplier * noise_sigma`.
    pub noise_multiplier: f64,
    /// Clean signal amplitude scale before resampling.
    pub amplitude_scale: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        DomainShift {
            resample_ratio: 1.0,
            noise_multiplier: 1.0,
            amplitude_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Source subjects per class.
    pub subjects_per_class: usize,
    /// Target subjects per class; defaults to `subjects_per_class` when zero.
    pub target_subjects_per_class: usize,
    /// Fraction of source subjects tagged `source-val` (taken from the end
    /// of each class).
    pub val_fraction: f64,
    /// Source-domain time points `L`.
    pub time_points: usize,
    /// ROI count `N`.
    pub rois: usize,
    /// Zero-based ROI indices that carry the class signal.
    pub planted_block: Vec<usize>,
    pub signal_strength: f64,
    pub noise_sigma: f64,
    pub domain_shift: DomainShift,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            subjects_per_class: 50,
            target_subjects_per_class: 0,
            val_fraction: 0.2,
            time_points: 200,
            rois: 10,
            planted_block: vec![0, 1, 2, 3],
            signal_strength: 1.0,
            noise_sigma: 1.0,
            domain_shift: DomainShift::default(),
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.subjects_per_class == 0 {
            return Err(Error::Config("subjects_per_class must be positive".into()));
        }
        if self.time_points < 2 || self.rois < 2 {
            return Err(Error::Config("need time_points >= 2 and rois >= 2".into()));
        }
        if let Some(&bad) = self.planted_block.iter().find(|&&r| r >= self.rois) {
            return Err(Error::Config(format!(
                "planted_block index {bad} out of range for rois={}",
                self.rois
            )));
        }
        if !(self.signal_strength.is_finite() && self.signal_strength >= 0.0) {
            return Err(Error::Config("signal_strength must be finite and >= 0".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma > 0.0) {
            return Err(Error::Config("noise_sigma must be finite and > 0".into()));
        }
        let ds = &self.domain_shift;
        for (name, v) in [
            ("resample_ratio", ds.resample_ratio),
            ("noise_multiplier", ds.noise_multiplier),
            ("amplitude_scale", ds.amplitude_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be finite and > 0")));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        let target_len = (ds.resample_ratio * self.time_points as f64).round() as usize;
        if target_len < 2 {
            return Err(Error::Config("resample_ratio leaves target series too short".into()));
        }
        Ok(())
    }

    fn target_per_class(&self) -> usize {
        if self.target_subjects_per_class == 0 {
            self.subjects_per_class
        } else {
            self.target_subjects_per_class
        }
    }
}

/// Manifest locations produced by [`generate_synthetic_cohort`].
#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    pub source_manifest: PathBuf,
    pub target_manifest: PathBuf,
}

fn mix(seed: u64, tag: u64) -> u64 {
    // splitmix64 step; good enough to decorrelate per-subject streams.
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn subject_rng(spec: &SyntheticSpec, domain: u64, class1: bool, index: usize) -> ChaCha8Rng {
    let tag = domain
        .wrapping_mul(1 << 40)
        .wrapping_add((class1 as u64) << 32)
        .wrapping_add(index as u64);
    ChaCha8Rng::seed_from_u64(mix(spec.seed, tag))
}

/// Smooth unit-variance latent signal: a random mix of the first few
/// harmonics, so it stays bandlimited under Fourier resampling.
fn latent_signal(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let harmonics = 8.min(len / 4).max(1);
    let mut z = vec![0.0; len];
    for f in 1..=harmonics {
        let amp: f64 = rng.gen_range(0.5..1.5);
        let phase: f64 = rng.gen_range(0.0..TAU);
        for (t, zt) in z.iter_mut().enumerate() {
            *zt += amp * (TAU * f as f64 * t as f64 / len as f64 + phase).sin();
        }
    }
    let mean = z.iter().sum::<f64>() / len as f64;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
    let sd = var.sqrt().max(1e-12);
    for v in &mut z {
        *v = (*v - mean) / sd;
    }
    z
}

/// Clean (noise-free) source-domain signal for one subject.
fn clean_signal(spec: &SyntheticSpec, class1: bool, rng: &mut ChaCha8Rng) -> Mat {
    let (l, n) = (spec.time_points, spec.rois);
    let mut clean = Mat::zeros(l, n);
    if class1 && spec.signal_strength > 0.0 && !spec.planted_block.is_empty() {
        let z = latent_signal(l, rng);
        for &c in &spec.planted_block {
            for t in 0..l {
                clean[(t, c)] = spec.signal_strength * z[t];
            }
        }
    }
    clean
}

fn add_noise(values: &mut Mat, sigma: f64, rng: &mut ChaCha8Rng) {
    for v in values.data_mut() {
        let e: f64 = rng.sample(StandardNormal);
        *v += sigma * e;
    }
}

fn source_subject(spec: &SyntheticSpec, class1: bool, index: usize) -> Mat {
    let mut rng = subject_rng(spec, 0, class1, index);
    let mut values = clean_signal(spec, class1, &mut rng);
    add_noise(&mut values, spec.noise_sigma, &mut rng);
    values
}

fn target_subject(spec: &SyntheticSpec, class1: bool, index: usize) -> Mat {
    let mut rng = subject_rng(spec, 1, class1, index);
    let clean = clean_signal(spec, class1, &mut rng);
    let ds = &spec.domain_shift;
    let target_len = (ds.resample_ratio * spec.time_points as f64).round() as usize;
    let mut values = Mat::zeros(target_len, spec.rois);
    for c in 0..spec.rois {
        let col: Vec<f64> = clean.col(c).iter().map(|v| v * ds.amplitude_scale).collect();
        let resampled =
            fourier_resample(&col, target_len).expect("clean signal is finite by construction");
        for (t, v) in resampled.into_iter().enumerate() {
            values[(t, c)] = v;
        }
    }
    add_noise(&mut values, spec.noise_sigma * ds.noise_multiplier, &mut rng);
    values
}

/// Writes source and target cohorts (matrix files plus manifests) under
/// `out_dir/source` and `out_dir/target`.
pub fn generate_synthetic_cohort(spec: &SyntheticSpec, out_dir: &Path) -> Result<SyntheticCohort> {
    spec.validate()?;

    let source_dir = out_dir.join("source");
    let target_dir = out_dir.join("target");

    let mut source_entries = Vec::new();
    let val_count = (spec.val_fraction * spec.subjects_per_class as f64).round() as usize;
    for class1 in [false, true] {
        for j in 0..spec.subjects_per_class {
            let id = format!("src-c{}-{:03}", class1 as u8, j);
            let rel = PathBuf::from(format!("mats/{id}.tsv"));
            write_matrix(&source_dir.join(&rel), &source_subject(spec, class1, j))?;
            let split = if j >= spec.subjects_per_class - val_count {
                SplitTag::SourceVal
            } else {
                SplitTag::SourceTrain
            };
            source_entries.push(ManifestEntry {
                subject_id: id,
                path: rel,
                label: Some(class1),
                split,
            });
        }
    }
    let mut source_manifest = DatasetManifest::new(source_entries, spec.rois);
    source_manifest.base_dir = source_dir.clone();
    let source_manifest_path = source_dir.join("manifest.tsv");
    source_manifest.write(&source_manifest_path)?;

    let mut target_entries = Vec::new();
    for class1 in [false, true] {
        for j in 0..spec.target_per_class() {
            let id = format!("tgt-c{}-{:03}", class1 as u8, j);
            let rel = PathBuf::from(format!("mats/{id}.tsv"));
            write_matrix(&target_dir.join(&rel), &target_subject(spec, class1, j))?;
            // Labels ride along for evaluation; adaptation never reads them.
            target_entries.push(ManifestEntry {
                subject_id: id,
                path: rel,
                label: Some(class1),
                split: SplitTag::Target,
            });
        }
    }
    let mut target_manifest = DatasetManifest::new(target_entries, spec.rois);
    target_manifest.base_dir = target_dir.clone();
    let target_manifest_path = target_dir.join("manifest.tsv");
    target_manifest.write(&target_manifest_path)?;

    Ok(SyntheticCohort {
        source_manifest: source_manifest_path,
        target_manifest: target_manifest_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_cohort;
    use crate::enrichment::pearson_matrix;
    use std::fs;
    use tempfile::tempdir;

    fn spec(signal_strength: f64) -> SyntheticSpec {
        SyntheticSpec {
            subjects_per_class: 50,
            target_subjects_per_class: 4,
            time_points: 120,
            rois: 8,
            planted_block: vec![0, 1, 2],
            signal_strength,
            noise_sigma: 1.0,
            seed: 99,
            ..SyntheticSpec::default()
        }
    }

    /// Mean within-block pairwise correlation per class over the source split.
    fn block_contrast(spec: &SyntheticSpec) -> (f64, f64) {
        let dir = tempdir().unwrap();
        let out = generate_synthetic_cohort(spec, dir.path()).unwrap();
        let manifest = DatasetManifest::read(&out.source_manifest).unwrap();
        let cohort = load_cohort(&manifest).unwrap();
        let mut sums = [0.0f64; 2];
        let mut counts = [0usize; 2];
        for s in &cohort {
            let class = s.label.unwrap() as usize;
            let corr = pearson_matrix(&s.values);
            for (a, &i) in spec.planted_block.iter().enumerate() {
                for &j in &spec.planted_block[a + 1..] {
                    sums[class] += corr.values[(i, j)];
                    counts[class] += 1;
                }
            }
        }
        (sums[0] / counts[0] as f64, sums[1] / counts[1] as f64)
    }

    #[test]
    fn zero_signal_means_no_block_contrast() {
        let (c0, c1) = block_contrast(&spec(0.0));
        assert!((c1 - c0).abs() < 0.05, "c0={c0} c1={c1}");
    }

    #[test]
    fn unit_signal_gives_strong_block_contrast() {
        let (c0, c1) = block_contrast(&spec(1.0));
        assert!(c1 - c0 > 0.2, "c0={c0} c1={c1}");
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let s = spec(1.0);
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        generate_synthetic_cohort(&s, dir_a.path()).unwrap();
        generate_synthetic_cohort(&s, dir_b.path()).unwrap();
        for sub in ["source/manifest.tsv", "source/mats/src-c1-007.tsv", "target/mats/tgt-c0-003.tsv"] {
            let a = fs::read(dir_a.path().join(sub)).unwrap();
            let b = fs::read(dir_b.path().join(sub)).unwrap();
            assert_eq!(a, b, "{sub} differs between runs");
        }
    }

    #[test]
    fn target_length_follows_resample_ratio() {
        let mut s = spec(1.0);
        s.domain_shift.resample_ratio = 1.25;
        let dir = tempdir().unwrap();
        let out = generate_synthetic_cohort(&s, dir.path()).unwrap();
        let manifest = DatasetManifest::read(&out.target_manifest).unwrap();
        let cohort = load_cohort(&manifest).unwrap();
        assert_eq!(cohort[0].len(), 150); // round(1.25 * 120)
        assert!(cohort.iter().all(|x| x.label.is_some()));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec(1.0);
        s.planted_block = vec![99];
        assert!(s.validate().is_err());
        let mut s = spec(1.0);
        s.noise_sigma = 0.0;
        assert!(s.validate().is_err());
    }
}
