//! Verification accuracy, inter-class variance, and hemi-pair distance
//! diagnostics.
//!
//! Verification follows the usual k-fold protocol: cosine similarities are
//! thresholded, each fold's threshold is fit on the other folds only, and
//! the reported accuracy is the mean of the held-out fold accuracies.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Embedder;

/// A labeled verification pair, by embedding index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationPair {
    pub a: usize,
    pub b: usize,
    pub same_identity: bool,
}

/// Cross-validated verification result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationOutcome {
    /// Mean of the per-fold held-out accuracies.
    pub accuracy: f64,
    /// Threshold maximizing accuracy over all pairs (reported operating
    /// point, not used for the fold accuracies).
    pub best_threshold: f64,
    pub fold_accuracies: Vec<f64>,
}

/// Full evaluation summary, serialized as JSON by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub best_threshold: f64,
    pub inter_class_variance: f64,
    pub mean_sym_pair_distance: f64,
    pub fold_accuracies: Vec<f64>,
}

/// Cosine similarity with a zero-norm guard.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

/// Similarity per pair, in pair order.
pub fn pair_similarities(embeddings: &[Vec<f64>], pairs: &[VerificationPair]) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|p| {
            if p.a == p.b {
                return Err(Error::Protocol(format!(
                    "pair references the same image twice (index {})",
                    p.a
                )));
            }
            let a = embeddings
                .get(p.a)
                .ok_or_else(|| Error::Protocol(format!("pair index {} out of range", p.a)))?;
            let b = embeddings
                .get(p.b)
                .ok_or_else(|| Error::Protocol(format!("pair index {} out of range", p.b)))?;
            Ok(cosine_similarity(a, b))
        })
        .collect()
}

/// Best accuracy over all cut points of `predict same iff sim >= t`.
/// Returns `(threshold, correct_count)`; ties resolve to the lowest
/// threshold.
fn best_cut(sims: &[f64], same: &[bool]) -> (f64, usize) {
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&i, &j| sims[i].total_cmp(&sims[j]));
    let total_pos = same.iter().filter(|&&s| s).count();

    // Cut k predicts: below k different, at or above k same.
    let mut correct = total_pos; // k = 0: everything predicted same
    let mut best_correct = correct;
    let mut best_k = 0usize;
    for k in 1..=order.len() {
        let moved = order[k - 1];
        if same[moved] {
            correct -= 1;
        } else {
            correct += 1;
        }
        // Only cuts between distinct similarity values are realizable.
        let realizable = k == order.len() || sims[order[k - 1]] < sims[order[k]];
        if realizable && correct > best_correct {
            best_correct = correct;
            best_k = k;
        }
    }

    let threshold = if best_k == 0 {
        sims[order[0]] - 1.0
    } else if best_k == order.len() {
        sims[order[order.len() - 1]] + 1.0
    } else {
        (sims[order[best_k - 1]] + sims[order[best_k]]) / 2.0
    };
    (threshold, best_correct)
}

/// K-fold verification accuracy on cosine similarities.
///
/// Pairs are assigned to folds as contiguous chunks; each chunk must hold
/// the same number of same- and different-identity pairs. The threshold
/// for each fold is fit on the remaining folds only.
pub fn verify(
    embeddings: &[Vec<f64>],
    pairs: &[VerificationPair],
    folds: usize,
) -> Result<VerificationOutcome> {
    if folds < 2 {
        return Err(Error::Protocol(format!(
            "verification needs at least 2 folds, got {folds}"
        )));
    }
    if pairs.is_empty() || !pairs.len().is_multiple_of(folds) {
        return Err(Error::Protocol(format!(
            "{} pairs cannot be divided into {folds} equal folds",
            pairs.len()
        )));
    }
    let n_pos = pairs.iter().filter(|p| p.same_identity).count();
    if n_pos == 0 || n_pos == pairs.len() {
        return Err(Error::Protocol(
            "pair set is degenerate: needs both same- and different-identity pairs".into(),
        ));
    }
    let fold_size = pairs.len() / folds;
    for f in 0..folds {
        let chunk = &pairs[f * fold_size..(f + 1) * fold_size];
        let pos = chunk.iter().filter(|p| p.same_identity).count();
        if pos * 2 != fold_size {
            return Err(Error::Protocol(format!(
                "fold {f} is unbalanced: {pos} same-identity out of {fold_size}"
            )));
        }
    }

    let sims = pair_similarities(embeddings, pairs)?;
    let same: Vec<bool> = pairs.iter().map(|p| p.same_identity).collect();

    let mut fold_accuracies = Vec::with_capacity(folds);
    for f in 0..folds {
        let test = f * fold_size..(f + 1) * fold_size;
        let mut train_sims = Vec::with_capacity(pairs.len() - fold_size);
        let mut train_same = Vec::with_capacity(pairs.len() - fold_size);
        for i in 0..pairs.len() {
            if !test.contains(&i) {
                train_sims.push(sims[i]);
                train_same.push(same[i]);
            }
        }
        let (threshold, _) = best_cut(&train_sims, &train_same);
        let correct = test
            .clone()
            .filter(|&i| (sims[i] >= threshold) == same[i])
            .count();
        fold_accuracies.push(correct as f64 / fold_size as f64);
    }

    let accuracy = fold_accuracies.iter().sum::<f64>() / folds as f64;
    let (best_threshold, _) = best_cut(&sims, &same);
    Ok(VerificationOutcome {
        accuracy,
        best_threshold,
        fold_accuracies,
    })
}

/// Dispersion of the per-class mean embeddings: the trace of the
/// covariance of the class centroids, class count as the divisor.
///
/// Centroids are taken over the raw embeddings. A unit-normalized variant
/// caps this quantity at 1 and hides the effect it exists to measure:
/// when training reallocates a fixed per-dimension variance budget from
/// within-class nuisance to between-class separation, only the raw
/// centroid spread registers the shift.
pub fn inter_class_variance(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if embeddings.len() != labels.len() {
        return Err(Error::Protocol(format!(
            "{} embeddings vs {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    if embeddings.is_empty() {
        return Err(Error::Protocol("no embeddings".into()));
    }
    let dim = embeddings[0].len();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (e, &label) in embeddings.iter().zip(labels) {
        if e.len() != dim {
            return Err(Error::Protocol("embeddings have mixed dimensions".into()));
        }
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericGuard("non-finite embedding".into()));
        }
        let entry = sums.entry(label).or_insert_with(|| (vec![0.0; dim], 0));
        for (s, v) in entry.0.iter_mut().zip(e) {
            *s += v;
        }
        entry.1 += 1;
    }
    if sums.len() < 2 {
        return Err(Error::Protocol(
            "inter-class variance needs at least 2 classes".into(),
        ));
    }

    let centroids: Vec<Vec<f64>> = sums
        .values()
        .map(|(sum, count)| sum.iter().map(|s| s / *count as f64).collect())
        .collect();
    let k = centroids.len() as f64;
    let mut mean = vec![0.0; dim];
    for c in &centroids {
        for (m, v) in mean.iter_mut().zip(c) {
            *m += v / k;
        }
    }
    let mut trace = 0.0;
    for c in &centroids {
        for (v, m) in c.iter().zip(&mean) {
            trace += (v - m) * (v - m) / k;
        }
    }
    Ok(trace)
}

/// Mean L2 distance over embedding pairs.
pub fn mean_pair_distance(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Protocol("no pairs to measure".into()));
    }
    let mut total = 0.0;
    for (a, b) in pairs {
        if a.len() != b.len() {
            return Err(Error::Protocol("pair has mismatched dimensions".into()));
        }
        total += a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
    }
    Ok(total / pairs.len() as f64)
}

/// Mean `||E(left) - E(right)||` over hemi-face canvas pairs (flattened,
/// normalized pixel tensors).
pub fn sym_pair_distance(embedder: &Embedder, halves: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if halves.is_empty() {
        return Err(Error::Protocol(
            "no symmetric records to measure pair distance on".into(),
        ));
    }
    let lefts: Vec<Vec<f64>> = halves.iter().map(|(l, _)| l.clone()).collect();
    let rights: Vec<Vec<f64>> = halves.iter().map(|(_, r)| r.clone()).collect();
    let el = embedder.embed_images(&lefts)?;
    let er = embedder.embed_images(&rights)?;
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = el.into_iter().zip(er).collect();
    mean_pair_distance(&pairs)
}

/// Build a balanced, fold-stratified pair list from labels: each fold gets
/// `pairs_per_fold / 2` same-identity and as many different-identity
/// pairs. Deterministic in `seed`.
pub fn make_verification_pairs(
    labels: &[usize],
    folds: usize,
    pairs_per_fold: usize,
    seed: u64,
) -> Result<Vec<VerificationPair>> {
    if folds < 2 {
        return Err(Error::Protocol("need at least 2 folds".into()));
    }
    if pairs_per_fold == 0 || !pairs_per_fold.is_multiple_of(2) {
        return Err(Error::Protocol(
            "pairs_per_fold must be positive and even".into(),
        ));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &label) in labels.iter().enumerate() {
        by_class.entry(label).or_default().push(i);
    }
    let multi: Vec<&Vec<usize>> = by_class.values().filter(|v| v.len() >= 2).collect();
    if by_class.len() < 2 || multi.is_empty() {
        return Err(Error::Protocol(
            "pair generation needs 2 classes and one class with 2 images".into(),
        ));
    }
    let classes: Vec<&Vec<usize>> = by_class.values().collect();

    let mut rng = crate::seeds::rng(seed, "verification-pairs", 0);
    let mut pairs = Vec::with_capacity(folds * pairs_per_fold);
    for _ in 0..folds {
        let mut fold = Vec::with_capacity(pairs_per_fold);
        for _ in 0..pairs_per_fold / 2 {
            let members = multi[rng.random_range(0..multi.len())];
            let a = rng.random_range(0..members.len());
            let mut b = rng.random_range(0..members.len() - 1);
            if b >= a {
                b += 1;
            }
            fold.push(VerificationPair {
                a: members[a],
                b: members[b],
                same_identity: true,
            });
        }
        for _ in 0..pairs_per_fold / 2 {
            let ca = rng.random_range(0..classes.len());
            let mut cb = rng.random_range(0..classes.len() - 1);
            if cb >= ca {
                cb += 1;
            }
            fold.push(VerificationPair {
                a: classes[ca][rng.random_range(0..classes[ca].len())],
                b: classes[cb][rng.random_range(0..classes[cb].len())],
                same_identity: false,
            });
        }
        pairs.extend(fold);
    }
    Ok(pairs)
}
