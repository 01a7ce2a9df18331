//! Evaluation: ROC-AUC, per-class accuracy, cross-entropy, and
//! expert-usage analysis.

use serde::{Deserialize, Serialize};

use crate::baselines::bce;
use crate::graph::{Dataset, Split};
use crate::model::{Model, ModelError};

/// Area under the ROC curve as the Mann-Whitney statistic
/// `(#{s_p > s_n} + 0.5 #{ties}) / (P * N)`, computed from sorted ranks in
/// `O(n log n)` with average-rank tie handling. `None` when either class is
/// absent.
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n = scores.len();
    let positives = labels.iter().filter(|&&y| y > 0.5).count();
    let negatives = n - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // Average ranks over tie groups, ranks starting at 1.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] > 0.5 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let auc = (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * negatives as f64);
    Some(auc)
}

/// Accuracy per class at `threshold`, reported as (majority, minority)
/// according to `majority_label` (identified on the training split by the
/// caller). A class absent from `labels` yields `None`.
pub fn class_accuracy(
    scores: &[f64],
    labels: &[f64],
    threshold: f64,
    majority_label: f64,
) -> (Option<f64>, Option<f64>) {
    let acc_of = |class: f64| {
        let mut total = 0usize;
        let mut correct = 0usize;
        for (s, y) in scores.iter().zip(labels) {
            let is_class = (*y > 0.5) == (class > 0.5);
            if is_class {
                total += 1;
                let pred = if *s >= threshold { 1.0 } else { 0.0 };
                if (pred > 0.5) == (*y > 0.5) {
                    correct += 1;
                }
            }
        }
        if total == 0 {
            None
        } else {
            Some(correct as f64 / total as f64)
        }
    };
    let majority = acc_of(majority_label);
    let minority = acc_of(1.0 - majority_label);
    (majority, minority)
}

/// The more frequent label value over the given samples of one task.
/// Ties break toward 0 (the conventional majority under imbalance).
pub fn majority_label(labels: &[f64]) -> f64 {
    let pos = labels.iter().filter(|&&y| y > 0.5).count();
    if pos * 2 > labels.len() {
        1.0
    } else {
        0.0
    }
}

/// Per-task evaluation metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: usize,
    pub auc: Option<f64>,
    pub accuracy: Option<f64>,
    pub majority_accuracy: Option<f64>,
    pub minority_accuracy: Option<f64>,
    pub cross_entropy: Option<f64>,
}

/// Evaluation over one split: per-task rows plus the unweighted mean AUC
/// over tasks where it is defined.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub tasks: Vec<TaskReport>,
    pub mean_auc: Option<f64>,
}

/// Score every unmasked (sample, task) pair of `split` and aggregate.
/// Majority classes are identified on the training split.
pub fn evaluate(
    model: &Model,
    ds: &Dataset,
    split: Split,
    mean_mix: bool,
) -> Result<EvalReport, ModelError> {
    let idx = ds.split_indices(split);
    let train_idx = ds.split_indices(Split::Train);
    let t = ds.num_tasks();
    // One forward per graph, reused across tasks.
    let mut probs: Vec<Vec<f64>> = Vec::with_capacity(idx.len());
    for &i in &idx {
        let x = model.embed(&ds.graphs[i])?;
        let mut row = Vec::with_capacity(t);
        for task in 0..t {
            let p = if mean_mix {
                model.head.mean_mix_predict(&model.store, &x, task)?
            } else {
                model.head.mixture_predict(&model.store, &x, task)?
            };
            row.push(p);
        }
        probs.push(row);
    }
    let mut tasks = Vec::with_capacity(t);
    let mut auc_sum = 0.0;
    let mut auc_count = 0usize;
    for task in 0..t {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (row, &i) in probs.iter().zip(&idx) {
            if let Some(y) = ds.labels.get(i, task) {
                scores.push(row[task]);
                labels.push(y);
            }
        }
        let train_labels: Vec<f64> = train_idx
            .iter()
            .filter_map(|&i| ds.labels.get(i, task))
            .collect();
        let maj = majority_label(&train_labels);
        let auc = roc_auc(&scores, &labels);
        if let Some(a) = auc {
            auc_sum += a;
            auc_count += 1;
        }
        let (majority_accuracy, minority_accuracy) =
            class_accuracy(&scores, &labels, 0.5, maj);
        let (accuracy, cross_entropy) = if labels.is_empty() {
            (None, None)
        } else {
            let correct = scores
                .iter()
                .zip(&labels)
                .filter(|(s, y)| (**s >= 0.5) == (**y > 0.5))
                .count();
            let ce =
                scores.iter().zip(&labels).map(|(s, y)| bce(*s, *y)).sum::<f64>() / labels.len() as f64;
            (Some(correct as f64 / labels.len() as f64), Some(ce))
        };
        tasks.push(TaskReport {
            task,
            auc,
            accuracy,
            majority_accuracy,
            minority_accuracy,
            cross_entropy,
        });
    }
    Ok(EvalReport {
        split: split.to_string(),
        tasks,
        mean_auc: if auc_count > 0 {
            Some(auc_sum / auc_count as f64)
        } else {
            None
        },
    })
}

/// Mean validation AUC used for model selection during training.
pub fn validation_auc(model: &Model, ds: &Dataset, mean_mix: bool) -> Result<Option<f64>, ModelError> {
    Ok(evaluate(model, ds, Split::Valid, mean_mix)?.mean_auc)
}

/// Mean gate weight per (class, expert) over one split of one task, plus
/// each expert's dominant class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertUsage {
    pub task: usize,
    /// `[negative, positive]` mean gate weights, one entry per expert.
    pub class_weights: [Vec<f64>; 2],
    /// Samples per class.
    pub class_counts: [usize; 2],
    /// For each expert, the class (0 or 1) with the larger mean weight.
    pub dominant_class: Vec<u8>,
}

impl ExpertUsage {
    /// Expert with the largest mean weight for `class`.
    pub fn argmax_expert(&self, class: usize) -> usize {
        let w = &self.class_weights[class];
        let mut best = 0;
        for (z, &v) in w.iter().enumerate() {
            if v > w[best] {
                best = z;
            }
        }
        best
    }
}

/// Average the gate prior per class over the unmasked samples of `split`.
pub fn expert_usage(
    model: &Model,
    ds: &Dataset,
    split: Split,
    task: usize,
) -> Result<ExpertUsage, ModelError> {
    let m = model.head.config().experts;
    let mut sums = [vec![0.0; m], vec![0.0; m]];
    let mut counts = [0usize; 2];
    for &i in &ds.split_indices(split) {
        let Some(y) = ds.labels.get(i, task) else {
            continue;
        };
        let prior = model.gate_prior(&ds.graphs[i], task)?;
        let c = if y > 0.5 { 1 } else { 0 };
        counts[c] += 1;
        for z in 0..m {
            sums[c][z] += prior[z];
        }
    }
    let mut class_weights = [vec![0.0; m], vec![0.0; m]];
    for c in 0..2 {
        if counts[c] > 0 {
            for z in 0..m {
                class_weights[c][z] = sums[c][z] / counts[c] as f64;
            }
        }
    }
    let dominant_class = (0..m)
        .map(|z| u8::from(class_weights[1][z] > class_weights[0][z]))
        .collect();
    Ok(ExpertUsage {
        task,
        class_weights,
        class_counts: counts,
        dominant_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    /// O(P*N) pair-counting oracle with half credit for ties.
    fn auc_bruteforce(scores: &[f64], labels: &[f64]) -> Option<f64> {
        let pos: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, y)| **y > 0.5)
            .map(|(s, _)| *s)
            .collect();
        let neg: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, y)| **y <= 0.5)
            .map(|(s, _)| *s)
            .collect();
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let mut wins = 0.0;
        for &p in &pos {
            for &n in &neg {
                if p > n {
                    wins += 1.0;
                } else if p == n {
                    wins += 0.5;
                }
            }
        }
        Some(wins / (pos.len() * neg.len()) as f64)
    }

    #[test]
    fn perfectly_separated_scores_score_one() {
        let auc = roc_auc(&[0.9, 0.8, 0.2, 0.1], &[1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn all_tied_scores_score_half() {
        let auc = roc_auc(&[0.4, 0.4, 0.4, 0.4], &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(auc, 0.5);
    }

    #[test]
    fn hand_case_returns_three_quarters() {
        let auc = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(auc, 0.75);
    }

    #[test]
    fn absent_class_is_undefined() {
        assert_eq!(roc_auc(&[0.2, 0.4], &[1.0, 1.0]), None);
        assert_eq!(roc_auc(&[0.2, 0.4], &[0.0, 0.0]), None);
    }

    #[test]
    fn rank_auc_equals_bruteforce_with_ties() {
        let mut rng = seeded_rng(0);
        for round in 0..200 {
            let n = rng.gen_range(2..=200);
            // Quantized scores so ties actually occur.
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..20) as f64 / 20.0).collect();
            let labels: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.3))).collect();
            let fast = roc_auc(&scores, &labels);
            let slow = auc_bruteforce(&scores, &labels);
            match (fast, slow) {
                (None, None) => {}
                (Some(a), Some(b)) => {
                    assert!((a - b).abs() < 1e-12, "round {round}: {a} vs {b}")
                }
                other => panic!("round {round}: disagreement {other:?}"),
            }
        }
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(
            seed in 0u64..5000,
        ) {
            let mut rng = seeded_rng(seed);
            let n = rng.gen_range(4..60);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let labels: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.4))).collect();
            let transformed: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 1.0).collect();
            let a = roc_auc(&scores, &labels);
            let b = roc_auc(&transformed, &labels);
            match (a, b) {
                (None, None) => {}
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                other => prop_assert!(false, "{other:?}"),
            }
        }

        #[test]
        fn auc_complement_symmetry(seed in 0u64..5000) {
            // Negating tie-free scores and flipping labels complements the AUC.
            let mut rng = seeded_rng(seed ^ 0xbeef);
            let n = rng.gen_range(4..60);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let labels: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.5))).collect();
            let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
            if let (Some(a), Some(b)) = (roc_auc(&scores, &labels), roc_auc(&negated, &labels)) {
                prop_assert!((a - (1.0 - b)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn class_accuracy_all_correct() {
        let scores = [0.9, 0.8, 0.1, 0.2];
        let labels = [1.0, 1.0, 0.0, 0.0];
        let (maj, min) = class_accuracy(&scores, &labels, 0.5, 0.0);
        assert_eq!(maj, Some(1.0));
        assert_eq!(min, Some(1.0));
    }

    #[test]
    fn predict_everything_majority() {
        // The classic failure mode: majority accuracy 1, minority 0.
        let scores = [0.1, 0.2, 0.3, 0.05];
        let labels = [0.0, 0.0, 1.0, 1.0];
        let (maj, min) = class_accuracy(&scores, &labels, 0.5, 0.0);
        assert_eq!(maj, Some(1.0));
        assert_eq!(min, Some(0.0));
    }

    #[test]
    fn hand_counted_confusion() {
        // 6 negatives (4 predicted negative), 4 positives (3 predicted positive).
        let scores = [0.1, 0.6, 0.2, 0.3, 0.7, 0.4, 0.9, 0.8, 0.55, 0.45];
        let labels = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let (maj, min) = class_accuracy(&scores, &labels, 0.5, 0.0);
        assert_eq!(maj, Some(4.0 / 6.0));
        assert_eq!(min, Some(3.0 / 4.0));
    }

    #[test]
    fn majority_label_breaks_ties_to_zero() {
        assert_eq!(majority_label(&[1.0, 0.0]), 0.0);
        assert_eq!(majority_label(&[1.0, 1.0, 0.0]), 1.0);
        assert_eq!(majority_label(&[0.0, 0.0, 1.0]), 0.0);
    }
}
