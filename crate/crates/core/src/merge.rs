//! Numeric verification that splitting attention over disjoint key segments
//! and merging the partial outputs is lossless.
//!
//! Each partial carries the streaming-softmax state for its segment: an
//! unnormalized output accumulator, the running row maximum, and the running
//! sum of shifted exponentials. Merging two partials rescales both sides to
//! the common maximum; finalizing divides the accumulator by the sum. All
//! arithmetic is double precision: this module certifies the semantics of
//! split-merge, not kernel-grade numerics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::ops::Range;
use thiserror::Error;

/// One attention row: query vector, key rows, value rows, and score scale.
#[derive(Debug, Clone)]
pub struct AttentionProblem {
    pub query: Vec<f64>,
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub scale: f64,
}

/// Streaming-softmax accumulator for a contiguous key segment.
#[derive(Debug, Clone)]
pub struct PartialAttention {
    /// Unnormalized output: sum of `exp(score - row_max) * value`.
    pub out: Vec<f64>,
    /// Running maximum score within the segment.
    pub row_max: f64,
    /// Running sum of `exp(score - row_max)`.
    pub row_sum: f64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MergeError {
    #[error("attention requires at least one key")]
    EmptyKeys,
    #[error("segment {start}..{end} is empty or out of bounds for {len} keys")]
    BadSegment {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("key/value row shapes do not match the query dimension")]
    ShapeMismatch,
    #[error("cannot finalize: no keys processed")]
    NoWeight,
}

impl AttentionProblem {
    /// Seeded random problem: entries uniform in [-1, 1], scale 1/sqrt(d).
    pub fn random(seed: u64, head_dim: usize, len: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vector = |dim: usize| -> Vec<f64> {
            (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let query = vector(head_dim);
        let keys = (0..len).map(|_| vector(head_dim)).collect();
        let values = (0..len).map(|_| vector(head_dim)).collect();
        Self {
            query,
            keys,
            values,
            scale: 1.0 / (head_dim as f64).sqrt(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    fn validate(&self) -> Result<(), MergeError> {
        let dim = self.query.len();
        if self.keys.len() != self.values.len() {
            return Err(MergeError::ShapeMismatch);
        }
        if self
            .keys
            .iter()
            .chain(self.values.iter())
            .any(|row| row.len() != dim)
        {
            return Err(MergeError::ShapeMismatch);
        }
        Ok(())
    }

    fn score(&self, index: usize) -> f64 {
        self.scale
            * self.query
                .iter()
                .zip(&self.keys[index])
                .map(|(q, k)| q * k)
                .sum::<f64>()
    }
}

/// Full-materialization reference: softmax over all scores, then the
/// weighted value sum. Max-subtraction keeps adversarial scores finite.
pub fn reference_attention(problem: &AttentionProblem) -> Result<Vec<f64>, MergeError> {
    problem.validate()?;
    if problem.is_empty() {
        return Err(MergeError::EmptyKeys);
    }
    let scores: Vec<f64> = (0..problem.len()).map(|i| problem.score(i)).collect();
    let row_max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - row_max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let dim = problem.query.len();
    let mut out = vec![0.0; dim];
    for (weight, value) in weights.iter().zip(&problem.values) {
        for (acc, v) in out.iter_mut().zip(value) {
            *acc += weight * v;
        }
    }
    for acc in &mut out {
        *acc /= total;
    }
    Ok(out)
}

/// Streaming accumulator over one contiguous key segment.
pub fn partial_attention(
    problem: &AttentionProblem,
    segment: Range<usize>,
) -> Result<PartialAttention, MergeError> {
    problem.validate()?;
    if segment.is_empty() || segment.end > problem.len() {
        return Err(MergeError::BadSegment {
            start: segment.start,
            end: segment.end,
            len: problem.len(),
        });
    }
    let dim = problem.query.len();
    let mut out = vec![0.0; dim];
    let mut row_max = f64::NEG_INFINITY;
    let mut row_sum = 0.0;
    for index in segment {
        let score = problem.score(index);
        if score > row_max {
            // Rescale history to the new maximum.
            let shift = if row_max.is_finite() {
                (row_max - score).exp()
            } else {
                0.0
            };
            row_sum *= shift;
            for acc in &mut out {
                *acc *= shift;
            }
            row_max = score;
        }
        let weight = (score - row_max).exp();
        row_sum += weight;
        for (acc, v) in out.iter_mut().zip(&problem.values[index]) {
            *acc += weight * v;
        }
    }
    Ok(PartialAttention {
        out,
        row_max,
        row_sum,
    })
}

/// Merge two partials from disjoint key segments of the same problem:
/// rescale both to the larger row maximum and add. Associative and
/// commutative up to floating-point rounding.
pub fn merge_partials(a: &PartialAttention, b: &PartialAttention) -> PartialAttention {
    let row_max = a.row_max.max(b.row_max);
    let scale_a = (a.row_max - row_max).exp();
    let scale_b = (b.row_max - row_max).exp();
    let out = a
        .out
        .iter()
        .zip(&b.out)
        .map(|(x, y)| x * scale_a + y * scale_b)
        .collect();
    PartialAttention {
        out,
        row_max,
        row_sum: a.row_sum * scale_a + b.row_sum * scale_b,
    }
}

/// Normalize an accumulator into the attention output.
pub fn finalize(partial: &PartialAttention) -> Result<Vec<f64>, MergeError> {
    if partial.row_sum <= 0.0 {
        return Err(MergeError::NoWeight);
    }
    Ok(partial.out.iter().map(|x| x / partial.row_sum).collect())
}

/// Compute attention by splitting the keys at `cuts`, accumulating each
/// segment independently, and folding the partials left to right.
pub fn split_merge_attention(
    problem: &AttentionProblem,
    cuts: &[usize],
) -> Result<Vec<f64>, MergeError> {
    let mut bounds = vec![0];
    bounds.extend_from_slice(cuts);
    bounds.push(problem.len());
    let mut merged: Option<PartialAttention> = None;
    for pair in bounds.windows(2) {
        if pair[0] == pair[1] {
            continue;
        }
        let partial = partial_attention(problem, pair[0]..pair[1])?;
        merged = Some(match merged {
            Some(acc) => merge_partials(&acc, &partial),
            None => partial,
        });
    }
    finalize(&merged.ok_or(MergeError::EmptyKeys)?)
}

/// Largest absolute componentwise difference.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// One failed case from [`verify_random_problems`].
#[derive(Debug, Clone)]
pub struct MergeFailure {
    pub seed: u64,
    pub segmentation: Vec<usize>,
    pub error: f64,
}

/// Result of a randomized split-merge sweep.
#[derive(Debug, Clone, Default)]
pub struct MergeVerification {
    pub cases: usize,
    pub max_error: f64,
    pub max_assoc_error: f64,
    pub failures: Vec<MergeFailure>,
}

impl MergeVerification {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Sweep seeded random problems through single-segment, two-way, random
/// multi-way, and fixed-chunk segmentations, comparing every merged result
/// against the reference and checking merge-order independence.
pub fn verify_random_problems(
    seeds: u64,
    tolerance: f64,
    assoc_tolerance: f64,
) -> Result<MergeVerification, MergeError> {
    let mut report = MergeVerification::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);
        let head_dim = 1 + (seed as usize % 16);
        let len = 2 + (rng.random_range(0..255) as usize).min(254);
        let problem = AttentionProblem::random(seed, head_dim, len);
        let reference = reference_attention(&problem)?;

        let mut segmentations: Vec<Vec<usize>> = vec![
            vec![],           // single segment
            vec![len / 2],    // even split
            vec![1],          // lone first key
            vec![len - 1],    // lone last key
        ];
        // Fixed-size chunking, the shape long-request splitting produces.
        let chunk = (len / 3).max(1);
        segmentations.push((chunk..len).step_by(chunk).collect());
        // Random 2..=8-way splits.
        for _ in 0..4 {
            let ways = rng.random_range(2..=8usize.min(len));
            let mut cuts: Vec<usize> = (0..ways - 1)
                .map(|_| rng.random_range(1..len))
                .collect();
            cuts.sort_unstable();
            cuts.dedup();
            segmentations.push(cuts);
        }

        for cuts in &segmentations {
            let merged = split_merge_attention(&problem, cuts)?;
            let error = max_abs_diff(&merged, &reference);
            report.cases += 1;
            report.max_error = report.max_error.max(error);
            if error > tolerance {
                report.failures.push(MergeFailure {
                    seed,
                    segmentation: cuts.clone(),
                    error,
                });
            }
        }

        // Merge-order independence on a three-way split.
        if len >= 3 {
            let (a, b) = (len / 3, 2 * len / 3);
            if a >= 1 && b > a && len > b {
                let pa = partial_attention(&problem, 0..a)?;
                let pb = partial_attention(&problem, a..b)?;
                let pc = partial_attention(&problem, b..len)?;
                let left = finalize(&merge_partials(&merge_partials(&pa, &pb), &pc))?;
                let right = finalize(&merge_partials(&pa, &merge_partials(&pb, &pc)))?;
                let error = max_abs_diff(&left, &right);
                report.max_assoc_error = report.max_assoc_error.max(error);
                if error > assoc_tolerance {
                    report.failures.push(MergeFailure {
                        seed,
                        segmentation: vec![a, b],
                        error,
                    });
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent oracle: textbook softmax-then-matvec written as one naive
    /// loop, no max subtraction, no shared helpers.
    #[allow(clippy::needless_range_loop)]
    fn naive_attention(problem: &AttentionProblem) -> Vec<f64> {
        let n = problem.keys.len();
        let dim = problem.query.len();
        let mut weights = vec![0.0f64; n];
        let mut total = 0.0;
        for i in 0..n {
            let mut dot = 0.0;
            for d in 0..dim {
                dot += problem.query[d] * problem.keys[i][d];
            }
            weights[i] = (problem.scale * dot).exp();
            total += weights[i];
        }
        let mut out = vec![0.0f64; dim];
        for i in 0..n {
            for d in 0..dim {
                out[d] += weights[i] / total * problem.values[i][d];
            }
        }
        out
    }

    #[test]
    fn singleton_softmax_returns_the_value_row() {
        let problem = AttentionProblem {
            query: vec![0.3, -0.7],
            keys: vec![vec![1.0, 2.0]],
            values: vec![vec![5.0, -3.0]],
            scale: 0.5,
        };
        assert_eq!(reference_attention(&problem).unwrap(), vec![5.0, -3.0]);
    }

    #[test]
    fn identical_keys_average_the_values() {
        let problem = AttentionProblem {
            query: vec![0.4, 0.1],
            keys: vec![vec![1.0, -1.0]; 4],
            values: vec![
                vec![1.0, 0.0],
                vec![3.0, 4.0],
                vec![-2.0, 8.0],
                vec![2.0, -4.0],
            ],
            scale: 0.7,
        };
        let out = reference_attention(&problem).unwrap();
        let expected = [1.0, 2.0];
        for (a, b) in out.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{out:?}");
        }
    }

    #[test]
    fn reference_matches_independent_naive_loop() {
        let problem = AttentionProblem::random(42, 8, 64);
        let reference = reference_attention(&problem).unwrap();
        let naive = naive_attention(&problem);
        assert!(max_abs_diff(&reference, &naive) <= 1e-12);
    }

    #[test]
    fn empty_keys_error() {
        let problem = AttentionProblem {
            query: vec![1.0],
            keys: vec![],
            values: vec![],
            scale: 1.0,
        };
        assert_eq!(reference_attention(&problem), Err(MergeError::EmptyKeys));
    }

    #[test]
    fn single_segment_partial_equals_reference() {
        let problem = AttentionProblem::random(7, 4, 32);
        let partial = partial_attention(&problem, 0..32).unwrap();
        let out = finalize(&partial).unwrap();
        let reference = reference_attention(&problem).unwrap();
        assert!(max_abs_diff(&out, &reference) <= 1e-12);
    }

    #[test]
    fn one_key_partial_state() {
        let problem = AttentionProblem {
            query: vec![2.0],
            keys: vec![vec![0.5], vec![1.5]],
            values: vec![vec![10.0], vec![20.0]],
            scale: 1.0,
        };
        let partial = partial_attention(&problem, 0..1).unwrap();
        assert_eq!(partial.row_max, 1.0);
        assert_eq!(partial.row_sum, 1.0);
        assert_eq!(partial.out, vec![10.0]);
    }

    #[test]
    fn empty_segment_is_rejected() {
        let problem = AttentionProblem::random(1, 2, 4);
        assert!(matches!(
            partial_attention(&problem, 2..2),
            Err(MergeError::BadSegment { .. })
        ));
        assert!(matches!(
            partial_attention(&problem, 2..9),
            Err(MergeError::BadSegment { .. })
        ));
    }

    #[test]
    fn merging_a_segment_with_itself_doubles_weights() {
        let problem = AttentionProblem::random(3, 4, 16);
        let partial = partial_attention(&problem, 0..16).unwrap();
        let doubled = merge_partials(&partial, &partial);
        assert!((doubled.row_sum - 2.0 * partial.row_sum).abs() <= 1e-12);
        for (d, s) in doubled.out.iter().zip(&partial.out) {
            assert!((d - 2.0 * s).abs() <= 1e-12);
        }
        // Normalization cancels the doubling.
        let a = finalize(&doubled).unwrap();
        let b = finalize(&partial).unwrap();
        assert!(max_abs_diff(&a, &b) <= 1e-15);
    }

    #[test]
    fn two_way_split_matches_reference() {
        let problem = AttentionProblem::random(11, 8, 64);
        let merged = split_merge_attention(&problem, &[40]).unwrap();
        let reference = reference_attention(&problem).unwrap();
        assert!(max_abs_diff(&merged, &reference) <= 1e-10);
    }

    #[test]
    fn three_way_merge_is_associative() {
        let problem = AttentionProblem::random(13, 8, 96);
        let pa = partial_attention(&problem, 0..32).unwrap();
        let pb = partial_attention(&problem, 32..64).unwrap();
        let pc = partial_attention(&problem, 64..96).unwrap();
        let left = finalize(&merge_partials(&merge_partials(&pa, &pb), &pc)).unwrap();
        let right = finalize(&merge_partials(&pa, &merge_partials(&pb, &pc))).unwrap();
        assert!(max_abs_diff(&left, &right) <= 1e-12);
    }

    #[test]
    fn finalize_without_keys_errors() {
        let empty = PartialAttention {
            out: vec![0.0],
            row_max: f64::NEG_INFINITY,
            row_sum: 0.0,
        };
        assert_eq!(finalize(&empty), Err(MergeError::NoWeight));
    }

    #[test]
    fn adversarial_scores_stay_finite() {
        // Scores near +-700 overflow exp() without max subtraction.
        let problem = AttentionProblem {
            query: vec![700.0],
            keys: vec![vec![1.0], vec![-1.0], vec![0.999]],
            values: vec![vec![1.0], vec![2.0], vec![3.0]],
            scale: 1.0,
        };
        let reference = reference_attention(&problem).unwrap();
        assert!(reference.iter().all(|x| x.is_finite()));
        let merged = split_merge_attention(&problem, &[1, 2]).unwrap();
        assert!(merged.iter().all(|x| x.is_finite()));
        assert!(max_abs_diff(&merged, &reference) <= 1e-10);
    }

    #[test]
    fn verify_sweep_passes_at_documented_tolerances() {
        let report = verify_random_problems(25, 1e-10, 1e-12).unwrap();
        assert!(report.passed(), "failures: {:?}", report.failures);
        assert!(report.cases >= 25 * 9);
        assert!(report.max_error <= 1e-10);
    }

    #[test]
    fn verify_sweep_reports_breaches_at_absurd_tolerance() {
        let report = verify_random_problems(3, 1e-22, 1e-22).unwrap();
        assert!(!report.passed());
        assert!(report.failures[0].error > 1e-22);
    }

    proptest! {
        // Any contiguous segmentation merges back to the reference result.
        #[test]
        fn prop_arbitrary_segmentation_is_lossless(
            seed in 0u64..256,
            raw_cuts in proptest::collection::vec(1usize..128, 0..6),
        ) {
            let problem = AttentionProblem::random(seed, 1 + (seed % 13) as usize, 128);
            let mut cuts: Vec<usize> = raw_cuts;
            cuts.sort_unstable();
            cuts.dedup();
            let merged = split_merge_attention(&problem, &cuts).unwrap();
            let reference = reference_attention(&problem).unwrap();
            prop_assert!(max_abs_diff(&merged, &reference) <= 1e-10);
        }

        // Merging is commutative up to rounding.
        #[test]
        fn prop_merge_commutes(seed in 0u64..128, cut in 1usize..63) {
            let problem = AttentionProblem::random(seed, 6, 64);
            let a = partial_attention(&problem, 0..cut).unwrap();
            let b = partial_attention(&problem, cut..64).unwrap();
            let ab = finalize(&merge_partials(&a, &b)).unwrap();
            let ba = finalize(&merge_partials(&b, &a)).unwrap();
            prop_assert!(max_abs_diff(&ab, &ba) <= 1e-12);
        }
    }
}
