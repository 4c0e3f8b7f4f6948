//! ROC machinery and group-wise AUC reporting.
//!
//! Positives are classified by `score >= tau`, negatives by `score < tau`.
//! Candidate thresholds are the midpoints between consecutive distinct
//! scores plus infinite sentinels, which makes the Youden tie rule well
//! defined; when only one distinct score exists (no midpoints) that score
//! itself is the lone finite candidate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Operating points of a score vector against binary labels. `thresholds`
/// is strictly decreasing from `+inf` to `-inf`; `sensitivity[i]` is the
/// fraction of positives with score `>= thresholds[i]` and `specificity[i]`
/// the fraction of negatives below it.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub sensitivity: Vec<f64>,
    pub specificity: Vec<f64>,
    pub positives: usize,
    pub negatives: usize,
}

fn check_binary_inputs(scores: &[f64], labels: &[usize]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Dim(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Degenerate("empty score vector".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Degenerate("non-finite score".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Config(format!("label {bad} is not binary")));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Degenerate(
            "roc needs both classes present".into(),
        ));
    }
    Ok((positives, negatives))
}

/// Builds the ROC curve over all candidate thresholds.
pub fn roc_curve(scores: &[f64], labels: &[usize]) -> Result<RocCurve> {
    let (positives, negatives) = check_binary_inputs(scores, labels)?;

    // Per distinct score value (ascending): positive and negative counts.
    let mut paired: Vec<(f64, usize)> = scores.iter().cloned().zip(labels.iter().cloned()).collect();
    paired.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut values: Vec<f64> = Vec::new();
    let mut pos_at: Vec<usize> = Vec::new();
    let mut neg_at: Vec<usize> = Vec::new();
    for (s, l) in paired {
        if values.last() != Some(&s) {
            values.push(s);
            pos_at.push(0);
            neg_at.push(0);
        }
        if l == 1 {
            *pos_at.last_mut().unwrap() += 1;
        } else {
            *neg_at.last_mut().unwrap() += 1;
        }
    }

    // Interior candidates, descending: midpoints of consecutive distinct
    // values, or the single value itself when no midpoints exist.
    let interior: Vec<f64> = if values.len() == 1 {
        vec![values[0]]
    } else {
        (0..values.len() - 1)
            .rev()
            .map(|i| (values[i] + values[i + 1]) / 2.0)
            .collect()
    };

    let mut thresholds = Vec::with_capacity(interior.len() + 2);
    let mut sensitivity = Vec::with_capacity(interior.len() + 2);
    let mut specificity = Vec::with_capacity(interior.len() + 2);

    thresholds.push(f64::INFINITY);
    sensitivity.push(0.0);
    specificity.push(1.0);

    // Suffix positive counts (scores >= tau) and prefix negative counts
    // (scores < tau), updated as tau sweeps downward.
    let total_pos = positives as f64;
    let total_neg = negatives as f64;
    let mut pos_ge: usize = 0;
    let mut neg_lt: usize = negatives;
    let mut next_value = values.len();
    for &tau in &interior {
        // Move distinct values from the "below tau" side to the ">= tau" side.
        while next_value > 0 && values[next_value - 1] >= tau {
            next_value -= 1;
            pos_ge += pos_at[next_value];
            neg_lt -= neg_at[next_value];
        }
        thresholds.push(tau);
        sensitivity.push(pos_ge as f64 / total_pos);
        specificity.push(neg_lt as f64 / total_neg);
    }

    thresholds.push(f64::NEG_INFINITY);
    sensitivity.push(1.0);
    specificity.push(0.0);

    Ok(RocCurve {
        thresholds,
        sensitivity,
        specificity,
        positives,
        negatives,
    })
}

/// Area under the ROC curve via trapezoidal integration. Equals the
/// fraction of (positive, negative) pairs ordered correctly, ties counted
/// as one half.
pub fn auc_score(scores: &[f64], labels: &[usize]) -> Result<f64> {
    let roc = roc_curve(scores, labels)?;
    let mut auc = 0.0;
    for i in 1..roc.thresholds.len() {
        let fpr0 = 1.0 - roc.specificity[i - 1];
        let fpr1 = 1.0 - roc.specificity[i];
        let tpr0 = roc.sensitivity[i - 1];
        let tpr1 = roc.sensitivity[i];
        auc += (fpr1 - fpr0) * (tpr0 + tpr1) / 2.0;
    }
    Ok(auc)
}

/// The threshold maximizing sensitivity + specificity. Ties are broken
/// toward the smallest finite threshold achieving the maximum; if only the
/// sentinels achieve it the smallest achiever is returned.
pub fn youden_threshold(roc: &RocCurve) -> f64 {
    let mut best_j = f64::NEG_INFINITY;
    for (u, v) in roc.sensitivity.iter().zip(roc.specificity.iter()) {
        let j = u + v;
        if j > best_j {
            best_j = j;
        }
    }
    let achievers = roc
        .thresholds
        .iter()
        .zip(roc.sensitivity.iter().zip(roc.specificity.iter()))
        .filter(|(_, (u, v))| *u + *v == best_j)
        .map(|(t, _)| *t);
    let mut best_finite: Option<f64> = None;
    let mut best_any = f64::INFINITY;
    for t in achievers {
        if t.is_finite() && best_finite.map_or(true, |b| t < b) {
            best_finite = Some(t);
        }
        if t < best_any {
            best_any = t;
        }
    }
    best_finite.unwrap_or(best_any)
}

/// Sample counts behind a [`GroupAucReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub aligned: usize,
    pub conflicting: usize,
    pub overall: usize,
    pub positives: usize,
    pub negatives: usize,
}

/// The evaluation quadruple: AUC on bias-aligned samples, on
/// bias-conflicting samples, their arithmetic mean, and AUC over all
/// samples. Entries are `None` when the subset holds a single class (or
/// when bias labels are unavailable) rather than being fabricated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAucReport {
    pub aligned: Option<f64>,
    pub conflicting: Option<f64>,
    pub balanced: Option<f64>,
    pub overall: Option<f64>,
    pub counts: GroupCounts,
}

fn subset_auc(scores: &[f64], labels: &[usize], idx: &[usize]) -> Result<Option<f64>> {
    if idx.is_empty() {
        return Ok(None);
    }
    let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
    let l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    match auc_score(&s, &l) {
        Ok(a) => Ok(Some(a)),
        Err(Error::Degenerate(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Group-wise AUC report. A sample is aligned when its target and bias
/// labels agree. Pass `None` for `bias` to get only the overall entry.
pub fn group_auc_report(
    scores: &[f64],
    targets: &[usize],
    bias: Option<&[usize]>,
) -> Result<GroupAucReport> {
    if scores.len() != targets.len() {
        return Err(Error::Dim(format!(
            "{} scores vs {} targets",
            scores.len(),
            targets.len()
        )));
    }
    if let Some(b) = bias {
        if b.len() != targets.len() {
            return Err(Error::Dim(format!(
                "{} bias labels vs {} targets",
                b.len(),
                targets.len()
            )));
        }
    }
    let all: Vec<usize> = (0..scores.len()).collect();
    let overall = subset_auc(scores, targets, &all)?;
    let positives = targets.iter().filter(|&&y| y == 1).count();

    let (aligned, conflicting, aligned_n, conflicting_n) = match bias {
        Some(b) => {
            let aligned_idx: Vec<usize> =
                (0..scores.len()).filter(|&i| targets[i] == b[i]).collect();
            let conflicting_idx: Vec<usize> =
                (0..scores.len()).filter(|&i| targets[i] != b[i]).collect();
            (
                subset_auc(scores, targets, &aligned_idx)?,
                subset_auc(scores, targets, &conflicting_idx)?,
                aligned_idx.len(),
                conflicting_idx.len(),
            )
        }
        None => (None, None, 0, 0),
    };
    let balanced = match (aligned, conflicting) {
        (Some(a), Some(c)) => Some((a + c) / 2.0),
        _ => None,
    };
    Ok(GroupAucReport {
        aligned,
        conflicting,
        balanced,
        overall,
        counts: GroupCounts {
            aligned: aligned_n,
            conflicting: conflicting_n,
            overall: scores.len(),
            positives,
            negatives: scores.len() - positives,
        },
    })
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roc_example_has_perfect_point() {
        let scores = [0.2, 0.3, 0.6, 0.9];
        let labels = [0, 0, 1, 1];
        let roc = roc_curve(&scores, &labels).unwrap();
        let expected = [f64::INFINITY, 0.75, 0.45, 0.25, f64::NEG_INFINITY];
        assert_eq!(roc.thresholds.len(), expected.len());
        for (got, want) in roc.thresholds.iter().zip(expected.iter()) {
            assert!(got == want || (got - want).abs() < 1e-12, "{got} vs {want}");
        }
        // At tau between 0.3 and 0.6 both rates are perfect.
        let i = roc
            .thresholds
            .iter()
            .position(|&t| (t - 0.45).abs() < 1e-12)
            .unwrap();
        assert_eq!(roc.sensitivity[i], 1.0);
        assert_eq!(roc.specificity[i], 1.0);
        assert_eq!((roc.positives, roc.negatives), (2, 2));
    }

    #[test]
    fn roc_endpoints_are_sentinels() {
        let roc = roc_curve(&[0.1, 0.9], &[0, 1]).unwrap();
        assert_eq!(roc.thresholds[0], f64::INFINITY);
        assert_eq!((roc.sensitivity[0], roc.specificity[0]), (0.0, 1.0));
        assert_eq!(*roc.thresholds.last().unwrap(), f64::NEG_INFINITY);
        assert_eq!(
            (
                *roc.sensitivity.last().unwrap(),
                *roc.specificity.last().unwrap()
            ),
            (1.0, 0.0)
        );
    }

    #[test]
    fn roc_rejects_single_class() {
        assert!(matches!(
            roc_curve(&[0.1, 0.9], &[1, 1]),
            Err(Error::Degenerate(_))
        ));
        assert!(roc_curve(&[0.5], &[0]).is_err());
    }

    #[test]
    fn roc_invariant_under_monotone_transform() {
        let scores = [0.2, 0.3, 0.6, 0.9, 0.6];
        let labels = [0, 0, 1, 1, 0];
        let scaled: Vec<f64> = scores.iter().map(|s| s * 10.0).collect();
        let a = roc_curve(&scores, &labels).unwrap();
        let b = roc_curve(&scaled, &labels).unwrap();
        assert_eq!(a.sensitivity, b.sensitivity);
        assert_eq!(a.specificity, b.specificity);
    }

    #[test]
    fn auc_separated_is_one() {
        assert_eq!(auc_score(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
    }

    #[test]
    fn auc_all_ties_is_half() {
        assert_eq!(auc_score(&[0.5, 0.5, 0.5], &[0, 1, 1]).unwrap(), 0.5);
    }

    #[test]
    fn auc_pair_example() {
        let a = auc_score(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert!((a - 0.75).abs() < 1e-15);
    }

    #[test]
    fn youden_example_and_tie_rules() {
        let roc = roc_curve(&[0.2, 0.3, 0.6, 0.9], &[0, 0, 1, 1]).unwrap();
        assert!((youden_threshold(&roc) - 0.45).abs() < 1e-12);

        // All ties: max(u+v) = 1 and the single score is the only finite
        // candidate.
        let roc = roc_curve(&[0.7, 0.7, 0.7], &[0, 1, 1]).unwrap();
        let i = roc.thresholds.iter().position(|&t| t == 0.7).unwrap();
        assert_eq!(roc.sensitivity[i] + roc.specificity[i], 1.0);
        assert_eq!(youden_threshold(&roc), 0.7);
    }

    #[test]
    fn youden_shifts_with_scores() {
        let scores = [0.2, 0.3, 0.6, 0.9];
        let labels = [0, 0, 1, 1];
        let t0 = youden_threshold(&roc_curve(&scores, &labels).unwrap());
        let shifted: Vec<f64> = scores.iter().map(|s| s + 5.0).collect();
        let t1 = youden_threshold(&roc_curve(&shifted, &labels).unwrap());
        assert!((t1 - (t0 + 5.0)).abs() < 1e-12);
    }

    #[test]
    fn group_report_symmetric_when_scores_ignore_bias() {
        // Identical score/label multisets in the aligned and conflicting
        // groups: all three AUCs coincide.
        let scores = [0.9, 0.8, 0.2, 0.1, 0.9, 0.8, 0.2, 0.1];
        let targets = [1, 1, 0, 0, 1, 1, 0, 0];
        let bias = [1, 1, 0, 0, 0, 0, 1, 1];
        let r = group_auc_report(&scores, &targets, Some(&bias)).unwrap();
        assert_eq!(r.aligned, r.conflicting);
        assert_eq!(r.aligned, r.overall);
        assert_eq!(r.balanced, r.aligned);
        assert_eq!(r.counts.aligned, 4);
        assert_eq!(r.counts.conflicting, 4);
    }

    #[test]
    fn group_report_balanced_is_mean() {
        let scores = [0.9, 0.1, 0.6, 0.7, 0.3, 0.2];
        let targets = [1, 0, 1, 0, 1, 0];
        let bias = [1, 0, 0, 1, 1, 0];
        let r = group_auc_report(&scores, &targets, Some(&bias)).unwrap();
        let (a, c) = (r.aligned.unwrap(), r.conflicting.unwrap());
        assert_eq!(r.balanced.unwrap(), (a + c) / 2.0);
    }

    #[test]
    fn group_report_single_class_subset_is_null() {
        // The conflicting subset holds only positives.
        let scores = [0.9, 0.1, 0.6];
        let targets = [1, 0, 1];
        let bias = [1, 0, 0];
        let r = group_auc_report(&scores, &targets, Some(&bias)).unwrap();
        assert!(r.aligned.is_some());
        assert!(r.conflicting.is_none());
        assert!(r.balanced.is_none());
        assert!(r.overall.is_some());
    }

    #[test]
    fn group_report_without_bias_has_overall_only() {
        let r = group_auc_report(&[0.9, 0.1], &[1, 0], None).unwrap();
        assert!(r.aligned.is_none() && r.conflicting.is_none() && r.balanced.is_none());
        assert_eq!(r.overall, Some(1.0));
    }

    #[test]
    fn report_json_uses_nulls() {
        let r = group_auc_report(&[0.9, 0.1], &[1, 0], None).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"aligned\":null"));
        assert!(json.contains("\"overall\":1.0"));
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
        let n = rng.random_range(2..=200);
        // Half the instances use coarse score grids to force ties.
        let coarse = rng.random_range(0..2) == 0;
        let mut scores = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let s: f64 = rng.random_range(0.0..1.0);
            scores.push(if coarse { (s * 8.0).round() / 8.0 } else { s });
            labels.push(rng.random_range(0..2usize));
        }
        // Ensure both classes.
        labels[0] = 0;
        labels[n - 1] = 1;
        (scores, labels)
    }

    #[test]
    fn trapezoid_matches_pair_oracle_and_youden_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..1000 {
            let (scores, labels) = random_instance(&mut rng);
            let trap = auc_score(&scores, &labels).unwrap();
            let pairs = oracles::pair_count_auc(&scores, &labels);
            assert!((trap - pairs).abs() < 1e-12, "trap={trap} pairs={pairs}");
            let fast = youden_threshold(&roc_curve(&scores, &labels).unwrap());
            let scan = oracles::youden_by_scan(&scores, &labels);
            assert_eq!(fast.to_bits(), scan.to_bits());
        }
    }

    proptest! {
        #[test]
        fn auc_invariant_under_increasing_transform(
            raw in proptest::collection::vec((0.0f64..1.0, 0usize..2), 4..60)
        ) {
            let mut scores: Vec<f64> = raw.iter().map(|(s, _)| (s * 16.0).round() / 16.0).collect();
            let mut labels: Vec<usize> = raw.iter().map(|(_, l)| *l).collect();
            scores.push(0.25);
            labels.push(0);
            scores.push(0.75);
            labels.push(1);
            let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp()).collect();
            let a = auc_score(&scores, &labels).unwrap();
            let b = auc_score(&transformed, &labels).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn sensitivity_monotone_along_curve(
            raw in proptest::collection::vec((0.0f64..1.0, 0usize..2), 4..60)
        ) {
            let mut scores: Vec<f64> = raw.iter().map(|(s, _)| *s).collect();
            let mut labels: Vec<usize> = raw.iter().map(|(_, l)| *l).collect();
            scores.push(0.1);
            labels.push(0);
            scores.push(0.9);
            labels.push(1);
            let roc = roc_curve(&scores, &labels).unwrap();
            // Thresholds descend, so sensitivity rises and specificity falls.
            for i in 1..roc.thresholds.len() {
                prop_assert!(roc.thresholds[i] < roc.thresholds[i - 1]);
                prop_assert!(roc.sensitivity[i] >= roc.sensitivity[i - 1]);
                prop_assert!(roc.specificity[i] <= roc.specificity[i - 1]);
            }
        }
    }
}
