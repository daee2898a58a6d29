//! Loss functions and parameter algebra: binary cross-entropy for source
//! training, the mutual-consistency constraint for label-free adaptation,
//! and branch-parameter averaging.
//!
//! The consistency sums run over ordered branch pairs `(i, j), i != j`, so
//! every unordered pair counts twice; [`PairCounting::Unordered`] halves
//! that if a caller wants each pair once.

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::tape::{softplus, Tape, Var};

/// Per-subject, per-branch encoder outputs entering the consistency losses.
#[derive(Debug, Clone, Default)]
pub struct ConsistencyBatch {
    /// `features[subject][branch]` is the length-`D` feature vector.
    pub features: Vec<Vec<Vec<f64>>>,
    /// `logits[subject][branch]`.
    pub logits: Vec<Vec<f64>>,
}

impl ConsistencyBatch {
    pub fn subjects(&self) -> usize {
        self.logits.len()
    }

    pub fn branches(&self) -> usize {
        self.logits.first().map_or(0, Vec::len)
    }

    fn validate(&self) -> Result<()> {
        if self.subjects() == 0 {
            return Err(Error::Contract("consistency batch has no subjects".into()));
        }
        let m = self.branches();
        if m < 2 {
            return Err(Error::Contract(format!(
                "consistency needs at least 2 branches, got {m}"
            )));
        }
        if self.features.len() != self.subjects() {
            return Err(Error::Contract("features/logits subject count mismatch".into()));
        }
        for (f, o) in self.features.iter().zip(&self.logits) {
            if f.len() != m || o.len() != m {
                return Err(Error::Contract("ragged branch counts in consistency batch".into()));
            }
        }
        Ok(())
    }
}

/// Whether branch pairs are counted once or twice (the index set
/// `i, j = 1..m, j != i` counts each unordered pair twice).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairCounting {
    #[default]
    Ordered,
    Unordered,
}

impl PairCounting {
    fn weight(self) -> f64 {
        match self {
            PairCounting::Ordered => 2.0,
            PairCounting::Unordered => 1.0,
        }
    }
}

/// Mean over samples of the stable binary cross-entropy
/// `softplus(o) - y * o`.
pub fn bce_loss(logits: &[f64], labels: &[bool]) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::Contract(format!(
            "bce_loss needs equal non-zero lengths, got {} logits and {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let sum: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&o, &y)| softplus(o) - if y { o } else { 0.0 })
        .sum();
    Ok(sum / logits.len() as f64)
}

/// Feature term: `(1/N_T) sum_n sum_{i != j} ||H_i - H_j||^2`.
pub fn feature_consistency(batch: &ConsistencyBatch) -> Result<f64> {
    feature_consistency_with(batch, PairCounting::Ordered)
}

pub fn feature_consistency_with(batch: &ConsistencyBatch, pairs: PairCounting) -> Result<f64> {
    batch.validate()?;
    let m = batch.branches();
    let mut total = 0.0;
    for subject in &batch.features {
        for i in 0..m {
            for j in i + 1..m {
                let dist: f64 = subject[i]
                    .iter()
                    .zip(&subject[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                total += pairs.weight() * dist;
            }
        }
    }
    Ok(total / batch.subjects() as f64)
}

/// Logit term: `(1/N_T) sum_n sum_{i != j} (O_i - O_j)^2`.
pub fn logit_consistency(batch: &ConsistencyBatch) -> Result<f64> {
    logit_consistency_with(batch, PairCounting::Ordered)
}

pub fn logit_consistency_with(batch: &ConsistencyBatch, pairs: PairCounting) -> Result<f64> {
    batch.validate()?;
    let m = batch.branches();
    let mut total = 0.0;
    for subject in &batch.logits {
        for i in 0..m {
            for j in i + 1..m {
                let d = subject[i] - subject[j];
                total += pairs.weight() * d * d;
            }
        }
    }
    Ok(total / batch.subjects() as f64)
}

/// `L_M = L_H + L_O`, the unweighted sum of the two consistency terms.
pub fn mutual_consistency(batch: &ConsistencyBatch) -> Result<f64> {
    mutual_consistency_with(batch, PairCounting::Ordered)
}

pub fn mutual_consistency_with(batch: &ConsistencyBatch, pairs: PairCounting) -> Result<f64> {
    Ok(feature_consistency_with(batch, pairs)? + logit_consistency_with(batch, pairs)?)
}

/// One subject's mutual-consistency term on a tape: ordered-pair sum of
/// squared feature and logit gaps across branches. Dividing by the batch
/// size is the caller's job.
pub fn subject_consistency_on_tape(
    tape: &mut Tape,
    features: &[Var],
    logits: &[Var],
) -> Var {
    assert_eq!(features.len(), logits.len());
    let m = features.len();
    assert!(m >= 2, "consistency needs at least 2 branches");
    let mut acc: Option<Var> = None;
    for i in 0..m {
        for j in i + 1..m {
            let df = tape.sub(features[i], features[j]);
            let sqf = tape.mul(df, df);
            let f_term = tape.sum_all(sqf);
            let do_ = tape.sub(logits[i], logits[j]);
            let sqo = tape.mul(do_, do_);
            let o_term = tape.sum_all(sqo);
            let pair = tape.add(f_term, o_term);
            let pair = tape.scale(pair, 2.0); // ordered pairs count twice
            acc = Some(match acc {
                None => pair,
                Some(a) => tape.add(a, pair),
            });
        }
    }
    acc.expect("m >= 2 guarantees at least one pair")
}

/// One sample's stable binary cross-entropy `softplus(o) - y * o` on a tape.
pub fn subject_bce_on_tape(tape: &mut Tape, logit: Var, label: bool) -> Var {
    let sp = tape.softplus(logit);
    if label {
        tape.sub(sp, logit)
    } else {
        sp
    }
}

/// Elementwise arithmetic mean of every tensor, `eps` and normalization
/// statistics included.
pub fn average_parameters(branches: &[EncoderParams]) -> Result<EncoderParams> {
    let first = branches
        .first()
        .ok_or_else(|| Error::Contract("average_parameters needs at least one branch".into()))?;
    let mut acc = first.tensor_entries();
    for other in &branches[1..] {
        if other.dims != first.dims {
            return Err(Error::Contract(format!(
                "branch dims mismatch: {:?} vs {:?}",
                other.dims, first.dims
            )));
        }
        let entries = other.tensor_entries();
        for ((name, shape, data), (oname, oshape, odata)) in acc.iter_mut().zip(&entries) {
            if name != oname || shape != oshape {
                return Err(Error::Contract(format!(
                    "branch tensor mismatch at '{name}' vs '{oname}'"
                )));
            }
            for (a, b) in data.iter_mut().zip(odata) {
                *a += b;
            }
        }
    }
    let count = branches.len() as f64;
    for (_, _, data) in &mut acc {
        for v in data.iter_mut() {
            *v /= count;
        }
    }
    EncoderParams::from_tensor_entries(first.dims, &acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderDims;
    use crate::mat::Mat;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hand_batch() -> ConsistencyBatch {
        ConsistencyBatch {
            features: vec![vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]],
            logits: vec![vec![1.0, 0.0, 0.0]],
        }
    }

    #[test]
    fn bce_hand_values() {
        assert!((bce_loss(&[0.0], &[true]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(&[50.0], &[true]).unwrap() < 1e-20);
        let ln3 = 3.0f64.ln();
        assert!((bce_loss(&[ln3], &[false]).unwrap() - 4.0f64.ln()).abs() < 1e-12);
        assert!(bce_loss(&[1e3], &[false]).unwrap().is_finite());
        assert!(bce_loss(&[], &[]).is_err());
        assert!(bce_loss(&[0.0], &[true, false]).is_err());
    }

    #[test]
    fn bce_is_convex_in_the_logit() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..200 {
            let a: f64 = rng.gen_range(-6.0..6.0);
            let b: f64 = rng.gen_range(-6.0..6.0);
            let y = rng.gen_bool(0.5);
            let mid = bce_loss(&[(a + b) / 2.0], &[y]).unwrap();
            let avg =
                (bce_loss(&[a], &[y]).unwrap() + bce_loss(&[b], &[y]).unwrap()) / 2.0;
            assert!(mid <= avg + 1e-12);
        }
    }

    #[test]
    fn consistency_hand_instance() {
        let batch = hand_batch();
        assert_eq!(feature_consistency(&batch).unwrap(), 8.0);
        assert_eq!(logit_consistency(&batch).unwrap(), 4.0);
        assert_eq!(mutual_consistency(&batch).unwrap(), 12.0);
        assert_eq!(
            feature_consistency_with(&batch, PairCounting::Unordered).unwrap(),
            4.0
        );
    }

    #[test]
    fn consistency_zero_iff_branches_identical() {
        let batch = ConsistencyBatch {
            features: vec![vec![vec![0.3, -0.7]; 3]; 2],
            logits: vec![vec![0.4; 3]; 2],
        };
        assert_eq!(mutual_consistency(&batch).unwrap(), 0.0);

        let batch = hand_batch();
        assert!(mutual_consistency(&batch).unwrap() > 0.0);
    }

    #[test]
    fn consistency_scales_quadratically() {
        let mut batch = hand_batch();
        let base = feature_consistency(&batch).unwrap();
        for subject in &mut batch.features {
            for branch in subject {
                for v in branch {
                    *v *= 3.0;
                }
            }
        }
        assert!((feature_consistency(&batch).unwrap() - 9.0 * base).abs() < 1e-12);
    }

    #[test]
    fn consistency_averages_over_subjects() {
        let one = ConsistencyBatch {
            features: vec![vec![vec![0.0]; 2]],
            logits: vec![vec![2.0, 0.0]],
        };
        let two = ConsistencyBatch {
            features: vec![vec![vec![0.0]; 2], vec![vec![0.0]; 2]],
            logits: vec![vec![2.0, 0.0], vec![1.0, 0.0]],
        };
        // Per-subject ordered sums: 8 and 2; mean = 5.
        assert_eq!(logit_consistency(&one).unwrap(), 8.0);
        assert_eq!(logit_consistency(&two).unwrap(), 5.0);
    }

    #[test]
    fn consistency_invariant_under_branch_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let features: Vec<Vec<Vec<f64>>> = (0..4)
            .map(|_| {
                (0..3)
                    .map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect()
            })
            .collect();
        let logits: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let batch = ConsistencyBatch {
            features: features.clone(),
            logits: logits.clone(),
        };
        let base = mutual_consistency(&batch).unwrap();
        for perm in [[1usize, 2, 0], [2, 0, 1], [0, 2, 1]] {
            let permuted = ConsistencyBatch {
                features: features
                    .iter()
                    .map(|s| perm.iter().map(|&i| s[i].clone()).collect())
                    .collect(),
                logits: logits
                    .iter()
                    .map(|s| perm.iter().map(|&i| s[i]).collect())
                    .collect(),
            };
            let v = mutual_consistency(&permuted).unwrap();
            assert!((v - base).abs() <= 1e-12);
        }
    }

    #[test]
    fn consistency_gradient_matches_finite_differences() {
        // d L_M / d H_i = (4/N_T) * sum_{j != i} (H_i - H_j) with ordered
        // counting; checked against central differences on the pure value.
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let subjects = 3;
        let branches = 3;
        let dim = 4;
        let features: Vec<Vec<Vec<f64>>> = (0..subjects)
            .map(|_| {
                (0..branches)
                    .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect()
            })
            .collect();
        let logits: Vec<Vec<f64>> = (0..subjects)
            .map(|_| (0..branches).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let batch = ConsistencyBatch {
            features: features.clone(),
            logits,
        };

        let n_t = subjects as f64;
        let h = 1e-6;
        for s in 0..subjects {
            for b in 0..branches {
                for k in 0..dim {
                    let analytic: f64 = (0..branches)
                        .filter(|&j| j != b)
                        .map(|j| 4.0 / n_t * (features[s][b][k] - features[s][j][k]))
                        .sum();
                    let mut plus = batch.clone();
                    plus.features[s][b][k] += h;
                    let mut minus = batch.clone();
                    minus.features[s][b][k] -= h;
                    let fd = (mutual_consistency(&plus).unwrap()
                        - mutual_consistency(&minus).unwrap())
                        / (2.0 * h);
                    let denom = analytic.abs().max(fd.abs()).max(1e-3);
                    assert!(
                        ((analytic - fd) / denom).abs() < 1e-6,
                        "s={s} b={b} k={k}: {analytic} vs {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn tape_consistency_matches_pure_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let m = 3;
        let d = 5;
        let feats: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let logits: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let fvars: Vec<Var> = feats.iter().map(|f| tape.leaf_row(f.clone())).collect();
        let ovars: Vec<Var> = logits
            .iter()
            .map(|&o| tape.leaf(Mat::from_vec(1, 1, vec![o])))
            .collect();
        let loss = subject_consistency_on_tape(&mut tape, &fvars, &ovars);

        let batch = ConsistencyBatch {
            features: vec![feats],
            logits: vec![logits],
        };
        let pure = mutual_consistency(&batch).unwrap();
        assert!((tape.scalar(loss) - pure).abs() < 1e-12);
    }

    #[test]
    fn tape_bce_matches_pure_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        for _ in 0..50 {
            let o: f64 = rng.gen_range(-8.0..8.0);
            let y = rng.gen_bool(0.5);
            let mut tape = Tape::new();
            let logit = tape.leaf(Mat::from_vec(1, 1, vec![o]));
            let loss = subject_bce_on_tape(&mut tape, logit, y);
            let pure = bce_loss(&[o], &[y]).unwrap();
            assert!((tape.scalar(loss) - pure).abs() < 1e-14);
        }
    }

    #[test]
    fn average_parameters_examples() {
        let dims = EncoderDims::new(5, 6).unwrap();
        let a = EncoderParams::init_seeded(dims, 70);
        let b = EncoderParams::init_seeded(dims, 71);
        let c = EncoderParams::init_seeded(dims, 72);

        // Identical branches average to themselves exactly.
        let same = average_parameters(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(same, a);

        // Two branches: elementwise midpoint.
        let mid = average_parameters(&[a.clone(), b.clone()]).unwrap();
        assert!(
            (mid.se_w1[(1, 2)] - (a.se_w1[(1, 2)] + b.se_w1[(1, 2)]) / 2.0).abs() < 1e-15
        );

        // eps means average, running stats included.
        let mut x = a.clone();
        let mut y = b.clone();
        let mut z = c.clone();
        x.gin[0].eps = 0.0;
        y.gin[0].eps = 0.3;
        z.gin[0].eps = 0.6;
        x.se_norm.running_var = vec![1.0; dims.d];
        y.se_norm.running_var = vec![2.0; dims.d];
        z.se_norm.running_var = vec![6.0; dims.d];
        let avg = average_parameters(&[x, y, z]).unwrap();
        assert!((avg.gin[0].eps - 0.3).abs() < 1e-15);
        assert!((avg.se_norm.running_var[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn average_parameters_rejects_shape_mismatch() {
        let a = EncoderParams::init_seeded(EncoderDims::new(5, 6).unwrap(), 73);
        let b = EncoderParams::init_seeded(EncoderDims::new(6, 6).unwrap(), 74);
        assert!(average_parameters(&[a, b]).is_err());
    }
}
