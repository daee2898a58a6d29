//! The data-feeding mathematics: sliding windows, the three enrichment
//! transforms, Pearson connectivity, and top-percentile binary adjacency.
//!
//! Every function here is pure; randomness (which enrichment parameters a
//! training step uses) enters only through caller-supplied values.

use rand::Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::data::RoiTimeseries;
use crate::error::{Error, Result};
use crate::mat::Mat;

/// Sliding-window geometry. A series of length `L >= l` yields
/// `p = floor((L - l) / s) + 1` windows starting at `0, s, 2s, ...`; the
/// trailing remainder is discarded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub length: usize,
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            length: 40,
            stride: 30,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.length < 2 {
            return Err(Error::Config("window length must be >= 2".into()));
        }
        if self.stride < 1 {
            return Err(Error::Config("window stride must be >= 1".into()));
        }
        Ok(())
    }
}

/// Whether "strongest" edges rank by raw signed correlation or by magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeStrength {
    #[default]
    Signed,
    Absolute,
}

/// Graph construction options.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    /// Fraction of strict-upper-triangle edges kept (ceil).
    pub keep_ratio: f64,
    pub edge_strength: EdgeStrength,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            keep_ratio: 0.3,
            edge_strength: EdgeStrength::Signed,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(Error::Config("keep_ratio must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// The enrichment branch families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchKind {
    Warp,
    ReceptiveField,
    Slice,
}

impl BranchKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BranchKind::Warp => "warp",
            BranchKind::ReceptiveField => "receptive-field",
            BranchKind::Slice => "slice",
        }
    }
}

/// One concrete enrichment view of a series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Enrichment {
    /// Standard windowing, no transform.
    None,
    /// Fourier-resample the whole series by ratio `alpha`, then window.
    Warp { alpha: f64 },
    /// Window with length `beta` instead of the configured length.
    ReceptiveField { beta: usize },
    /// Take the contiguous sub-series `[start, start + round(gamma * L))`,
    /// then window.
    Slice { gamma: f64, start: usize },
}

impl Enrichment {
    /// The deterministic inference-time view of a branch: every branch sees
    /// the standard windowing.
    pub fn neutral(kind: BranchKind, window: &WindowConfig) -> Enrichment {
        match kind {
            BranchKind::Warp => Enrichment::Warp { alpha: 1.0 },
            BranchKind::ReceptiveField => Enrichment::ReceptiveField {
                beta: window.length,
            },
            BranchKind::Slice => Enrichment::Slice {
                gamma: 1.0,
                start: 0,
            },
        }
    }
}

/// Permitted enrichment parameter domains, sampled uniformly during
/// training.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EnrichmentSets {
    pub warp_ratios: Vec<f64>,
    pub window_sizes: Vec<usize>,
    pub slice_ratios: Vec<f64>,
}

impl Default for EnrichmentSets {
    fn default() -> Self {
        EnrichmentSets {
            warp_ratios: vec![1.0 / 1.3, 1.0 / 1.1, 1.0, 1.1, 1.3],
            window_sizes: vec![40, 60, 80, 100],
            slice_ratios: vec![0.85, 0.90, 0.95, 1.00],
        }
    }
}

impl EnrichmentSets {
    pub fn validate(&self) -> Result<()> {
        if self.warp_ratios.is_empty()
            || self.window_sizes.is_empty()
            || self.slice_ratios.is_empty()
        {
            return Err(Error::Config("enrichment parameter sets must be non-empty".into()));
        }
        if self.warp_ratios.iter().any(|&a| !(a.is_finite() && a > 0.0)) {
            return Err(Error::Config("warp ratios must be finite and > 0".into()));
        }
        if self.window_sizes.iter().any(|&b| b < 2) {
            return Err(Error::Config("window sizes must be >= 2".into()));
        }
        if self.slice_ratios.iter().any(|&g| !(g > 0.0 && g <= 1.0)) {
            return Err(Error::Config("slice ratios must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// Membership check with a small tolerance on the real-valued sets.
    pub fn permits(&self, e: &Enrichment) -> bool {
        match e {
            Enrichment::None => true,
            Enrichment::Warp { alpha } => {
                self.warp_ratios.iter().any(|a| (a - alpha).abs() <= 1e-9)
            }
            Enrichment::ReceptiveField { beta } => self.window_sizes.contains(beta),
            Enrichment::Slice { gamma, .. } => {
                self.slice_ratios.iter().any(|g| (g - gamma).abs() <= 1e-9)
            }
        }
    }

    /// Draws one enrichment for a branch. The slice start is uniform over
    /// the valid range for a series of length `series_len`.
    pub fn sample(
        &self,
        kind: BranchKind,
        series_len: usize,
        rng: &mut impl Rng,
    ) -> Enrichment {
        match kind {
            BranchKind::Warp => {
                let alpha = self.warp_ratios[rng.gen_range(0..self.warp_ratios.len())];
                Enrichment::Warp { alpha }
            }
            BranchKind::ReceptiveField => {
                let beta = self.window_sizes[rng.gen_range(0..self.window_sizes.len())];
                Enrichment::ReceptiveField { beta }
            }
            BranchKind::Slice => {
                let gamma = self.slice_ratios[rng.gen_range(0..self.slice_ratios.len())];
                let slice_len = scaled_len(series_len, gamma);
                let max_start = series_len.saturating_sub(slice_len);
                let start = if max_start == 0 {
                    0
                } else {
                    rng.gen_range(0..=max_start)
                };
                Enrichment::Slice { gamma, start }
            }
        }
    }
}

/// One sliding-window snapshot: binary adjacency plus one-hot node features.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowGraph {
    pub adjacency: Mat,
    pub window_index: usize,
}

impl WindowGraph {
    pub fn nodes(&self) -> usize {
        self.adjacency.rows()
    }

    /// Layer-0 node features: one-hot per node.
    pub fn node_features(&self) -> Mat {
        Mat::identity(self.nodes())
    }

    /// Number of 1-entries in the strict upper triangle.
    pub fn edge_count(&self) -> usize {
        let n = self.nodes();
        let mut count = 0;
        for i in 0..n {
            for j in i + 1..n {
                if self.adjacency[(i, j)] != 0.0 {
                    count += 1;
                }
            }
        }
        count
    }
}

/// `round(ratio * len)`, the length rule shared by warping and slicing.
pub fn scaled_len(len: usize, ratio: f64) -> usize {
    (ratio * len as f64).round() as usize
}

/// Splits a series into `floor((L - l) / s) + 1` overlapping windows.
pub fn partition_windows(values: &Mat, cfg: &WindowConfig) -> Result<Vec<Mat>> {
    cfg.validate()?;
    let l = values.rows();
    if l < cfg.length {
        return Err(Error::SeriesTooShort {
            length: l,
            window: cfg.length,
        });
    }
    let p = (l - cfg.length) / cfg.stride + 1;
    let mut windows = Vec::with_capacity(p);
    for t in 0..p {
        let start = t * cfg.stride;
        let mut w = Mat::zeros(cfg.length, values.cols());
        for r in 0..cfg.length {
            for c in 0..values.cols() {
                w[(r, c)] = values[(start + r, c)];
            }
        }
        windows.push(w);
    }
    Ok(windows)
}

/// Resamples a real signal to `target_len` points in the Fourier domain.
///
/// The spectrum is truncated or zero-padded to the new length with conjugate
/// symmetry preserved (even-length Nyquist bins are folded or split), and the
/// amplitude is rescaled so a constant signal maps to the same constant. The
/// result is the periodic bandlimited interpolant evaluated on the new grid.
pub fn fourier_resample(signal: &[f64], target_len: usize) -> Result<Vec<f64>> {
    let l = signal.len();
    if l < 2 || target_len < 2 {
        return Err(Error::Contract(format!(
            "fourier_resample needs lengths >= 2, got {l} -> {target_len}"
        )));
    }
    if signal.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite input to fourier_resample".into()));
    }

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(l);
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&x| Complex::new(x, 0.0)).collect();
    fft.process(&mut buf);

    let lp = target_len;
    let mut spec = vec![Complex::new(0.0, 0.0); lp];
    let n = l.min(lp);
    let nyq = n / 2 + 1; // non-negative-frequency bins to copy
    spec[..nyq].copy_from_slice(&buf[..nyq]);
    let neg = n - nyq; // negative-frequency bins
    for k in 0..neg {
        spec[lp - neg + k] = buf[l - neg + k];
    }
    if n % 2 == 0 {
        let h = n / 2;
        if lp < l {
            // Downsampling: the mirrored source bin aliases onto the new
            // Nyquist; summing the conjugate pair keeps the output real.
            spec[h] += buf[l - h];
        } else if lp > l {
            // Upsampling: split the old Nyquist across both sides.
            spec[h] *= 0.5;
            spec[lp - h] = spec[h];
        }
    }

    let ifft = planner.plan_fft_inverse(lp);
    ifft.process(&mut spec);
    // The unnormalized inverse needs 1/lp; the amplitude rescale adds lp/l.
    let scale = 1.0 / l as f64;
    Ok(spec.into_iter().map(|c| c.re * scale).collect())
}

/// Stretches or contracts a series to `round(alpha * L)` time points by
/// resampling each ROI column independently. `alpha = 1` is an exact no-op.
pub fn window_warp(series: &RoiTimeseries, alpha: f64) -> Result<RoiTimeseries> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Contract(format!("warp ratio must be positive, got {alpha}")));
    }
    let l = series.len();
    let target = scaled_len(l, alpha);
    if target == l {
        return Ok(series.clone());
    }
    let mut values = Mat::zeros(target, series.rois());
    for c in 0..series.rois() {
        let col = series.values.col(c);
        let resampled = fourier_resample(&col, target)?;
        for (t, v) in resampled.into_iter().enumerate() {
            values[(t, c)] = v;
        }
    }
    Ok(RoiTimeseries {
        subject_id: series.subject_id.clone(),
        values,
        label: series.label,
        constant_rois: series.constant_rois.clone(),
    })
}

/// Contiguous sub-series of length `round(gamma * L)` starting at `start`.
pub fn window_slice(series: &RoiTimeseries, gamma: f64, start: usize) -> Result<RoiTimeseries> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Contract(format!("slice ratio must be in (0, 1], got {gamma}")));
    }
    let l = series.len();
    let slice_len = scaled_len(l, gamma);
    if start + slice_len > l {
        return Err(Error::Bounds(format!(
            "slice [{start}, {}) out of range for series of length {l}",
            start + slice_len
        )));
    }
    let mut values = Mat::zeros(slice_len, series.rois());
    for r in 0..slice_len {
        for c in 0..series.rois() {
            values[(r, c)] = series.values[(start + r, c)];
        }
    }
    Ok(RoiTimeseries {
        subject_id: series.subject_id.clone(),
        values,
        label: series.label,
        constant_rois: series.constant_rois.clone(),
    })
}

/// Pearson correlation matrix of a window's columns, with degenerate
/// (zero-variance) columns listed separately.
#[derive(Debug, Clone)]
pub struct PearsonMatrix {
    pub values: Mat,
    /// Columns with zero variance; all their entries, diagonal included,
    /// are 0 rather than NaN.
    pub constant_columns: Vec<usize>,
}

/// Sample Pearson correlation between all column pairs of an `l x N` window.
pub fn pearson_matrix(window: &Mat) -> PearsonMatrix {
    let (l, n) = window.shape();
    assert!(l >= 2, "pearson_matrix needs at least 2 samples per column");

    // Center columns once; correlation is the normalized dot product.
    let mut centered = Mat::zeros(l, n);
    let mut norms = vec![0.0f64; n];
    let mut constant = Vec::new();
    for c in 0..n {
        let col = window.col(c);
        let mean = col.iter().sum::<f64>() / l as f64;
        let scale = col.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mut sumsq = 0.0;
        for r in 0..l {
            let z = window[(r, c)] - mean;
            centered[(r, c)] = z;
            sumsq += z * z;
        }
        let tol = f64::EPSILON * (l as f64) * (scale + 1.0);
        if sumsq.sqrt() <= tol {
            constant.push(c);
            norms[c] = 0.0;
        } else {
            norms[c] = sumsq.sqrt();
        }
    }

    let mut out = Mat::zeros(n, n);
    for i in 0..n {
        if norms[i] == 0.0 {
            continue; // whole row stays 0, diagonal included
        }
        out[(i, i)] = 1.0;
        for j in i + 1..n {
            if norms[j] == 0.0 {
                continue;
            }
            let mut dot = 0.0;
            for r in 0..l {
                dot += centered[(r, i)] * centered[(r, j)];
            }
            let r = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            out[(i, j)] = r;
            out[(j, i)] = r;
        }
    }
    PearsonMatrix {
        values: out,
        constant_columns: constant,
    }
}

/// Keeps exactly `ceil(keep_ratio * N(N-1)/2)` strongest upper-triangle
/// edges, ranking by descending strength with ties broken by ascending
/// `(i, j)` index, then symmetrizes. The diagonal stays zero.
pub fn threshold_adjacency(weights: &Mat, cfg: &GraphConfig) -> Result<Mat> {
    cfg.validate()?;
    let n = weights.rows();
    if weights.cols() != n {
        return Err(Error::Contract(format!(
            "threshold_adjacency needs a square matrix, got {} x {}",
            n,
            weights.cols()
        )));
    }
    let pairs = n * (n - 1) / 2;
    // Nudge below the product before ceil so ratios like 0.1 (whose f64 is
    // slightly above the rational value) keep exact-integer boundaries.
    let k = ((cfg.keep_ratio * pairs as f64) - 1e-9).ceil().max(0.0) as usize;
    let k = k.min(pairs);

    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(pairs);
    for i in 0..n {
        for j in i + 1..n {
            let w = match cfg.edge_strength {
                EdgeStrength::Signed => weights[(i, j)],
                EdgeStrength::Absolute => weights[(i, j)].abs(),
            };
            edges.push((w, i, j));
        }
    }
    edges.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut adj = Mat::zeros(n, n);
    for &(_, i, j) in edges.iter().take(k) {
        adj[(i, j)] = 1.0;
        adj[(j, i)] = 1.0;
    }
    Ok(adj)
}

/// Applies an enrichment view, windows the result, and maps each window to
/// a thresholded Pearson graph.
pub fn build_graph_sequence(
    series: &RoiTimeseries,
    enrichment: &Enrichment,
    window: &WindowConfig,
    graph: &GraphConfig,
) -> Result<Vec<WindowGraph>> {
    let (values, effective_window);
    match enrichment {
        Enrichment::None => {
            values = series.values.clone();
            effective_window = *window;
        }
        Enrichment::Warp { alpha } => {
            values = window_warp(series, *alpha)?.values;
            effective_window = *window;
        }
        Enrichment::ReceptiveField { beta } => {
            values = series.values.clone();
            effective_window = WindowConfig {
                length: *beta,
                stride: window.stride,
            };
        }
        Enrichment::Slice { gamma, start } => {
            values = window_slice(series, *gamma, *start)?.values;
            effective_window = *window;
        }
    }
    let windows = partition_windows(&values, &effective_window).map_err(|e| match e {
        Error::SeriesTooShort { length, window } => Error::Contract(format!(
            "series '{}' too short after enrichment: length {length} < window {window}",
            series.subject_id
        )),
        other => other,
    })?;
    windows
        .iter()
        .enumerate()
        .map(|(t, w)| {
            let corr = pearson_matrix(w);
            Ok(WindowGraph {
                adjacency: threshold_adjacency(&corr.values, graph)?,
                window_index: t,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    fn series_from(values: Mat) -> RoiTimeseries {
        RoiTimeseries::new("t", values, None).unwrap()
    }

    fn random_series(rng: &mut ChaCha8Rng, l: usize, n: usize) -> RoiTimeseries {
        let data = (0..l * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        series_from(Mat::from_vec(l, n, data))
    }

    // -- windowing ---------------------------------------------------------

    #[test]
    fn partition_matches_hand_counts() {
        let cfg = WindowConfig::default();
        let m = Mat::zeros(176, 4);
        let windows = partition_windows(&m, &cfg).unwrap();
        assert_eq!(windows.len(), 5);
        // Start offsets 0, 30, 60, 90, 120 recovered from the content.
        let mut tagged = Mat::zeros(176, 4);
        for r in 0..176 {
            tagged[(r, 0)] = r as f64;
        }
        let windows = partition_windows(&tagged, &cfg).unwrap();
        let starts: Vec<f64> = windows.iter().map(|w| w[(0, 0)]).collect();
        assert_eq!(starts, vec![0.0, 30.0, 60.0, 90.0, 120.0]);
    }

    #[test]
    fn partition_exact_fit_yields_one_window() {
        let cfg = WindowConfig::default();
        let windows = partition_windows(&Mat::zeros(40, 3), &cfg).unwrap();
        assert_eq!(windows.len(), 1);
    }

    #[test]
    fn partition_too_short_errors_with_context() {
        let cfg = WindowConfig::default();
        let err = partition_windows(&Mat::zeros(39, 3), &cfg).unwrap_err();
        match err {
            Error::SeriesTooShort { length, window } => assert_eq!((length, window), (39, 40)),
            other => panic!("wrong error: {other}"),
        }
    }

    // -- Fourier resampling ------------------------------------------------

    /// Naive O(L * L') spectral interpolation used as an independent oracle:
    /// brute-force DFT, band-limit to the shared bandwidth, evaluate the
    /// trigonometric polynomial on the new grid. On the boundary frequency
    /// `+-band` both conjugate bins evaluate to `(-1)^t` on integer grid
    /// points, so keeping downsampled boundary bins at full weight matches
    /// the fold convention, and splitting an upsampled Nyquist in half
    /// matches the split convention.
    fn dft_resample_oracle(signal: &[f64], target_len: usize) -> Vec<f64> {
        let l = signal.len();
        let lp = target_len;
        let band = l.min(lp) as f64 / 2.0;
        let mut coeffs: Vec<(f64, Complex<f64>)> = Vec::new(); // (signed freq, X[k])
        for k in 0..l {
            let mut x = Complex::new(0.0, 0.0);
            for (t, &v) in signal.iter().enumerate() {
                let ang = -TAU * k as f64 * t as f64 / l as f64;
                x += Complex::new(v, 0.0) * Complex::new(ang.cos(), ang.sin());
            }
            let f = if 2 * k <= l { k as f64 } else { k as f64 - l as f64 };
            if f.abs() < band - 1e-9 {
                coeffs.push((f, x));
            } else if (f.abs() - band).abs() < 1e-9 {
                if lp > l {
                    coeffs.push((f, x * 0.5));
                    coeffs.push((-f, x.conj() * 0.5));
                } else {
                    coeffs.push((f, x));
                }
            }
        }
        (0..lp)
            .map(|t| {
                let mut acc = Complex::new(0.0, 0.0);
                for &(f, x) in &coeffs {
                    let ang = TAU * f * t as f64 / lp as f64;
                    acc += x * Complex::new(ang.cos(), ang.sin());
                }
                acc.re / l as f64
            })
            .collect()
    }

    #[test]
    fn resample_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for l in [16usize, 17, 40] {
            let x: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y = fourier_resample(&x, l).unwrap();
            for (a, b) in x.iter().zip(&y) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn resample_preserves_dc() {
        for (l, lp) in [(20usize, 33usize), (33, 20), (16, 8), (8, 16)] {
            let x = vec![3.0; l];
            let y = fourier_resample(&x, lp).unwrap();
            for v in y {
                assert!((v - 3.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn resample_bandlimited_sine_matches_analytic() {
        let l = 100;
        let lp = 110;
        let x: Vec<f64> = (0..l).map(|t| (TAU * 3.0 * t as f64 / l as f64).sin()).collect();
        let y = fourier_resample(&x, lp).unwrap();
        for (t, v) in y.iter().enumerate() {
            let expect = (TAU * 3.0 * t as f64 / lp as f64).sin();
            assert!((v - expect).abs() < 1e-6, "t={t}: {v} vs {expect}");
        }
    }

    #[test]
    fn resample_matches_naive_dft_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (l, lp) in [(24usize, 36usize), (36, 24), (25, 40), (40, 25), (30, 31)] {
            let x: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fast = fourier_resample(&x, lp).unwrap();
            let slow = dft_resample_oracle(&x, lp);
            for (t, (a, b)) in fast.iter().zip(&slow).enumerate() {
                assert!((a - b).abs() < 1e-8, "l={l} lp={lp} t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn resample_up_down_roundtrip() {
        let l = 64;
        // Bandlimited: energy well below the Nyquist of both grids.
        let x: Vec<f64> = (0..l)
            .map(|t| {
                (TAU * 2.0 * t as f64 / l as f64).sin() + 0.5 * (TAU * 7.0 * t as f64 / l as f64).cos()
            })
            .collect();
        let up = fourier_resample(&x, 2 * l).unwrap();
        let back = fourier_resample(&up, l).unwrap();
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn resample_rejects_non_finite() {
        let err = fourier_resample(&[1.0, f64::NAN, 2.0], 6).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    // -- warping and slicing -------------------------------------------------

    #[test]
    fn warp_length_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = random_series(&mut rng, 100, 3);
        assert_eq!(window_warp(&s, 1.1).unwrap().len(), 110);
        let s = random_series(&mut rng, 296, 3);
        assert_eq!(window_warp(&s, 1.0 / 1.3).unwrap().len(), 228);
    }

    #[test]
    fn warp_identity_ratio_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let s = random_series(&mut rng, 60, 4);
        let warped = window_warp(&s, 1.0).unwrap();
        assert_eq!(warped.values, s.values);
    }

    #[test]
    fn slice_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let s = random_series(&mut rng, 200, 3);
        let sliced = window_slice(&s, 0.85, 10).unwrap();
        assert_eq!(sliced.len(), 170);
        assert_eq!(sliced.values[(0, 1)], s.values[(10, 1)]);
        assert_eq!(sliced.values[(169, 2)], s.values[(179, 2)]);

        assert!(matches!(window_slice(&s, 0.85, 31), Err(Error::Bounds(_))));

        let full = window_slice(&s, 1.0, 0).unwrap();
        assert_eq!(full.values, s.values);
        assert!(window_slice(&s, 1.0, 1).is_err());
    }

    // -- Pearson -------------------------------------------------------------

    /// Textbook two-pass covariance oracle for one column pair.
    fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
        let vx = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n;
        let vy = y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n;
        if vx == 0.0 || vy == 0.0 {
            return 0.0;
        }
        cov / (vx.sqrt() * vy.sqrt())
    }

    #[test]
    fn pearson_hand_examples() {
        let w = Mat::from_vec(3, 3, vec![1.0, 3.0, 1.0, 2.0, 2.0, 2.0, 3.0, 1.0, 4.0]);
        let p = pearson_matrix(&w);
        assert!((p.values[(0, 0)] - 1.0).abs() < 1e-12); // self
        assert!((p.values[(0, 1)] + 1.0).abs() < 1e-12); // perfect anticorrelation
        assert!((p.values[(0, 2)] - 0.98198).abs() < 1e-4);
    }

    #[test]
    fn pearson_constant_column_rule() {
        let w = Mat::from_vec(3, 2, vec![7.0, 1.0, 7.0, 2.0, 7.0, 5.0]);
        let p = pearson_matrix(&w);
        assert_eq!(p.constant_columns, vec![0]);
        assert_eq!(p.values[(0, 0)], 0.0);
        assert_eq!(p.values[(0, 1)], 0.0);
        assert_eq!(p.values[(1, 1)], 1.0);
    }

    #[test]
    fn pearson_matches_oracle_on_random_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..20 {
            let l = rng.gen_range(5..60);
            let n = rng.gen_range(2..12);
            let s = random_series(&mut rng, l, n);
            let p = pearson_matrix(&s.values);
            for i in 0..n {
                for j in 0..n {
                    let expect = if i == j {
                        1.0
                    } else {
                        pearson_oracle(&s.values.col(i), &s.values.col(j))
                    };
                    assert!(
                        (p.values[(i, j)] - expect).abs() < 1e-10,
                        "entry ({i},{j})"
                    );
                }
            }
        }
    }

    // -- thresholding ----------------------------------------------------------

    #[test]
    fn threshold_keeps_exact_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = GraphConfig::default();
        for (n, expect) in [(10usize, 14usize), (50, 368), (116, 2001)] {
            let data = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut w = Mat::from_vec(n, n, data);
            for i in 0..n {
                w[(i, i)] = 1.0;
                for j in 0..i {
                    w[(i, j)] = w[(j, i)];
                }
            }
            let adj = threshold_adjacency(&w, &cfg).unwrap();
            let g = WindowGraph {
                adjacency: adj,
                window_index: 0,
            };
            assert_eq!(g.edge_count(), expect, "n={n}");
        }
    }

    #[test]
    fn threshold_three_node_example() {
        let mut w = Mat::identity(3);
        w[(0, 1)] = 0.9;
        w[(1, 0)] = 0.9;
        w[(0, 2)] = 0.5;
        w[(2, 0)] = 0.5;
        w[(1, 2)] = 0.1;
        w[(2, 1)] = 0.1;
        let cfg = GraphConfig {
            keep_ratio: 1.0 / 3.0,
            ..GraphConfig::default()
        };
        let adj = threshold_adjacency(&w, &cfg).unwrap();
        assert_eq!(adj[(0, 1)], 1.0);
        assert_eq!(adj[(1, 0)], 1.0);
        assert_eq!(adj[(0, 2)], 0.0);
        assert_eq!(adj[(1, 2)], 0.0);
    }

    #[test]
    fn threshold_ties_break_lexicographically() {
        let n = 5;
        let w = Mat::filled(n, n, 0.5);
        let cfg = GraphConfig {
            keep_ratio: 0.3, // ceil(0.3 * 10) = 3
            ..GraphConfig::default()
        };
        let adj = threshold_adjacency(&w, &cfg).unwrap();
        // First three upper-triangle pairs in lexicographic order.
        assert_eq!(adj[(0, 1)], 1.0);
        assert_eq!(adj[(0, 2)], 1.0);
        assert_eq!(adj[(0, 3)], 1.0);
        assert_eq!(adj[(0, 4)], 0.0);
        assert_eq!(adj[(1, 2)], 0.0);
    }

    #[test]
    fn threshold_absolute_ranking_differs_from_signed() {
        let mut w = Mat::identity(3);
        w[(0, 1)] = -0.95;
        w[(1, 0)] = -0.95;
        w[(0, 2)] = 0.4;
        w[(2, 0)] = 0.4;
        w[(1, 2)] = 0.2;
        w[(2, 1)] = 0.2;
        let signed = threshold_adjacency(
            &w,
            &GraphConfig {
                keep_ratio: 1.0 / 3.0,
                edge_strength: EdgeStrength::Signed,
            },
        )
        .unwrap();
        let absolute = threshold_adjacency(
            &w,
            &GraphConfig {
                keep_ratio: 1.0 / 3.0,
                edge_strength: EdgeStrength::Absolute,
            },
        )
        .unwrap();
        assert_eq!(signed[(0, 2)], 1.0);
        assert_eq!(absolute[(0, 1)], 1.0);
    }

    // -- graph sequences -----------------------------------------------------

    #[test]
    fn graph_sequence_composes_window_and_edge_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let s = random_series(&mut rng, 176, 116);
        let graphs = build_graph_sequence(
            &s,
            &Enrichment::None,
            &WindowConfig::default(),
            &GraphConfig::default(),
        )
        .unwrap();
        assert_eq!(graphs.len(), 5);
        for g in &graphs {
            assert_eq!(g.edge_count(), 2001);
        }
    }

    #[test]
    fn graph_sequence_receptive_field_window_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let s = random_series(&mut rng, 171, 6);
        let graphs = build_graph_sequence(
            &s,
            &Enrichment::ReceptiveField { beta: 100 },
            &WindowConfig::default(),
            &GraphConfig::default(),
        )
        .unwrap();
        assert_eq!(graphs.len(), 3);
    }

    #[test]
    fn graph_sequence_slice_window_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let s = random_series(&mut rng, 100, 6);
        let graphs = build_graph_sequence(
            &s,
            &Enrichment::Slice {
                gamma: 0.85,
                start: 0,
            },
            &WindowConfig::default(),
            &GraphConfig::default(),
        )
        .unwrap();
        assert_eq!(graphs.len(), 2);
    }

    #[test]
    fn graph_sequence_warp_identity_is_bitwise_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let s = random_series(&mut rng, 130, 12);
        let plain = build_graph_sequence(
            &s,
            &Enrichment::None,
            &WindowConfig::default(),
            &GraphConfig::default(),
        )
        .unwrap();
        let warped = build_graph_sequence(
            &s,
            &Enrichment::Warp { alpha: 1.0 },
            &WindowConfig::default(),
            &GraphConfig::default(),
        )
        .unwrap();
        assert_eq!(plain.len(), warped.len());
        for (a, b) in plain.iter().zip(&warped) {
            assert_eq!(a.adjacency, b.adjacency);
        }
    }

    #[test]
    fn graph_sequence_too_short_after_enrichment() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let s = random_series(&mut rng, 45, 5);
        // 45 * 0.85 = round 38 < 40
        let err = build_graph_sequence(
            &s,
            &Enrichment::Slice {
                gamma: 0.85,
                start: 0,
            },
            &WindowConfig::default(),
            &GraphConfig::default(),
        )
        .unwrap_err();
        match err {
            Error::Contract(msg) => assert!(msg.contains("too short after enrichment")),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn neutral_views_reduce_to_standard_windowing() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let s = random_series(&mut rng, 100, 8);
        let window = WindowConfig::default();
        let graph = GraphConfig::default();
        let base = build_graph_sequence(&s, &Enrichment::None, &window, &graph).unwrap();
        for kind in [BranchKind::Warp, BranchKind::ReceptiveField, BranchKind::Slice] {
            let view = Enrichment::neutral(kind, &window);
            let got = build_graph_sequence(&s, &view, &window, &graph).unwrap();
            assert_eq!(base.len(), got.len());
            for (a, b) in base.iter().zip(&got) {
                assert_eq!(a.adjacency, b.adjacency, "{kind:?}");
            }
        }
    }

    #[test]
    fn sampled_enrichments_stay_in_their_sets() {
        let sets = EnrichmentSets::default();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..200 {
            for kind in [BranchKind::Warp, BranchKind::ReceptiveField, BranchKind::Slice] {
                let e = sets.sample(kind, 200, &mut rng);
                assert!(sets.permits(&e), "{e:?}");
                if let Enrichment::Slice { gamma, start } = e {
                    assert!(start + scaled_len(200, gamma) <= 200);
                }
            }
        }
    }

    // -- properties ------------------------------------------------------------

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn prop_adjacency_count_symmetry(seed in 0u64..1000, n in 3usize..24) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_series(&mut rng, 30, n);
            let corr = pearson_matrix(&s.values);
            let cfg = GraphConfig::default();
            let adj = threshold_adjacency(&corr.values, &cfg).unwrap();
            let pairs = n * (n - 1) / 2;
            let expect = ((0.3 * pairs as f64) - 1e-9).ceil() as usize;
            let g = WindowGraph { adjacency: adj.clone(), window_index: 0 };
            prop_assert_eq!(g.edge_count(), expect);
            for i in 0..n {
                prop_assert_eq!(adj[(i, i)], 0.0);
                for j in 0..n {
                    prop_assert_eq!(adj[(i, j)], adj[(j, i)]);
                }
            }
        }

        #[test]
        fn prop_pearson_bounded_and_scale_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_series(&mut rng, 25, 6);
            let p = pearson_matrix(&s.values);
            for v in p.values.data() {
                prop_assert!((-1.0..=1.0).contains(v));
            }
            // Positive per-column rescaling leaves correlations unchanged.
            let mut scaled = s.values.clone();
            let factors: Vec<f64> = (0..6).map(|_| rng.gen_range(0.1..10.0)).collect();
            for r in 0..25 {
                for c in 0..6 {
                    scaled[(r, c)] *= factors[c];
                }
            }
            let q = pearson_matrix(&scaled);
            prop_assert!(p.values.max_abs_diff(&q.values) < 1e-10);
        }
    }
}
