//! Evaluation metrics: accuracy, pooled equal error rate, minimum average
//! detection cost and confusion counts.
//!
//! Every utterance contributes one L-class posterior. For detection metrics
//! it is expanded into L one-vs-rest trials (the pooled trial structure of
//! the language recognition evaluations). Thresholds are swept exhaustively
//! over the distinct score values, so results are exact and match the
//! brute-force oracles in the tests bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{DidError, Result};

/// Fixed detection cost parameters: unit costs, target prior one half.
pub const P_TARGET: f64 = 0.5;
/// Posteriors are floored here before any logarithm.
pub const POSTERIOR_FLOOR: f64 = 1e-12;

/// One detection trial: does `utt_id` belong to `class_idx`?
#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub utt_id: String,
    pub class_idx: usize,
    pub score: f64,
    pub is_target: bool,
}

/// A pooled set of detection trials.
#[derive(Clone, Debug, Default)]
pub struct TrialSet {
    trials: Vec<Trial>,
}

impl TrialSet {
    /// Validates that every score is finite.
    pub fn new(trials: Vec<Trial>) -> Result<Self> {
        for t in &trials {
            if !t.score.is_finite() {
                return Err(DidError::Eval(format!(
                    "trial '{}' class {} has non-finite score",
                    t.utt_id, t.class_idx
                )));
            }
        }
        Ok(TrialSet { trials })
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }
}

/// Index of the maximum score; ties resolve to the lowest class index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Fraction of utterances whose argmax decision matches the reference.
pub fn accuracy(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_aligned(scores, labels)?;
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(s, &l)| argmax(s) == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Expands posteriors into pooled one-vs-rest trials, one per class per
/// utterance, scored by the class posterior itself.
pub fn trials_from_posteriors(
    utt_ids: &[String],
    scores: &[Vec<f64>],
    labels: &[usize],
) -> Result<TrialSet> {
    check_aligned(scores, labels)?;
    if utt_ids.len() != scores.len() {
        return Err(DidError::Eval(format!(
            "{} utterance ids against {} score rows",
            utt_ids.len(),
            scores.len()
        )));
    }
    let mut trials = Vec::with_capacity(scores.len() * scores[0].len());
    for ((id, row), &label) in utt_ids.iter().zip(scores).zip(labels) {
        for (c, &s) in row.iter().enumerate() {
            trials.push(Trial {
                utt_id: id.clone(),
                class_idx: c,
                score: s,
                is_target: c == label,
            });
        }
    }
    TrialSet::new(trials)
}

/// Pooled equal error rate.
///
/// Sweeps every distinct score as a threshold in ascending order. At
/// threshold `t`, a target with score below `t` is a miss and a non-target
/// with score at or above `t` is a false alarm. Returns
/// `(P_miss + P_fa) / 2` at the threshold minimising their gap, taking the
/// earliest such threshold on ties.
pub fn eer(set: &TrialSet) -> Result<f64> {
    let targets: Vec<f64> = set
        .trials
        .iter()
        .filter(|t| t.is_target)
        .map(|t| t.score)
        .collect();
    let non_targets: Vec<f64> = set
        .trials
        .iter()
        .filter(|t| !t.is_target)
        .map(|t| t.score)
        .collect();
    if targets.is_empty() || non_targets.is_empty() {
        return Err(DidError::Eval(format!(
            "equal error rate needs both trial kinds ({} targets, {} non-targets)",
            targets.len(),
            non_targets.len()
        )));
    }

    let mut thresholds: Vec<f64> = set.trials.iter().map(|t| t.score).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let mut best_gap = f64::INFINITY;
    let mut best = 0.0;
    for &t in &thresholds {
        let misses = targets.iter().filter(|&&s| s < t).count();
        let fas = non_targets.iter().filter(|&&s| s >= t).count();
        let p_miss = misses as f64 / targets.len() as f64;
        let p_fa = fas as f64 / non_targets.len() as f64;
        let gap = (p_miss - p_fa).abs();
        if gap < best_gap {
            best_gap = gap;
            best = (p_miss + p_fa) / 2.0;
        }
    }
    Ok(best)
}

/// Detection scores for one posterior row: log of the class posterior minus
/// log of the mean of the other classes' posteriors, with flooring.
pub fn detection_scores(posterior: &[f64]) -> Vec<f64> {
    let l = posterior.len();
    let floored: Vec<f64> = posterior.iter().map(|p| p.max(POSTERIOR_FLOOR)).collect();
    (0..l)
        .map(|c| {
            let others: f64 = floored
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != c)
                .map(|(_, p)| p)
                .sum::<f64>()
                / (l - 1) as f64;
            floored[c].ln() - others.ln()
        })
        .collect()
}

/// Minimum average detection cost, times 100.
///
/// For each candidate threshold, class `c` is detected on an utterance when
/// its detection score reaches the threshold. The average cost over target
/// classes uses unit miss and false-alarm costs with a 0.5 target prior;
/// the minimum over all distinct detection-score thresholds is returned.
pub fn min_cavg_x100(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_aligned(scores, labels)?;
    let l = scores[0].len();
    if l < 2 {
        return Err(DidError::Eval(format!(
            "average cost needs at least 2 classes, got {l}"
        )));
    }
    let mut class_counts = vec![0usize; l];
    for &lab in labels {
        class_counts[lab] += 1;
    }
    if let Some(missing) = class_counts.iter().position(|&c| c == 0) {
        return Err(DidError::Eval(format!(
            "class {missing} absent from the reference labels"
        )));
    }

    let det: Vec<Vec<f64>> = scores.iter().map(|row| detection_scores(row)).collect();
    let mut thresholds: Vec<f64> = det.iter().flatten().copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let mut best = f64::INFINITY;
    for &theta in &thresholds {
        let mut sum_over_targets = 0.0;
        for lt in 0..l {
            let misses = det
                .iter()
                .zip(labels)
                .filter(|(row, &lab)| lab == lt && row[lt] < theta)
                .count();
            let p_miss = misses as f64 / class_counts[lt] as f64;
            let mut p_fa_sum = 0.0;
            for ln in 0..l {
                if ln == lt {
                    continue;
                }
                let fas = det
                    .iter()
                    .zip(labels)
                    .filter(|(row, &lab)| lab == ln && row[lt] >= theta)
                    .count();
                p_fa_sum += fas as f64 / class_counts[ln] as f64;
            }
            sum_over_targets += P_TARGET * p_miss + (1.0 - P_TARGET) * p_fa_sum / (l - 1) as f64;
        }
        let cavg = sum_over_targets / l as f64;
        if cavg < best {
            best = cavg;
        }
    }
    Ok(best * 100.0)
}

/// Confusion counts: rows are reference classes, columns argmax decisions.
pub fn confusion(scores: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    check_aligned(scores, labels)?;
    let mut m = vec![vec![0usize; n_classes]; n_classes];
    for (row, &lab) in scores.iter().zip(labels) {
        if lab >= n_classes || row.len() != n_classes {
            return Err(DidError::Eval(format!(
                "label {lab} or row of {} outside the {n_classes}-class setup",
                row.len()
            )));
        }
        m[lab][argmax(row)] += 1;
    }
    Ok(m)
}

/// A full evaluation over one scored test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub eer: f64,
    pub min_cavg_x100: f64,
    pub confusion: Vec<Vec<usize>>,
    pub labels: Vec<String>,
    pub n_utterances: usize,
}

impl EvalReport {
    /// Human-readable rendering with a confusion table.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "utterances: {}\naccuracy: {:.2}%\neer: {:.2}%\nmin_cavg_x100: {:.2}\n",
            self.n_utterances,
            self.accuracy * 100.0,
            self.eer * 100.0,
            self.min_cavg_x100
        ));
        out.push_str("confusion (rows reference, columns decision):\n");
        let width = self
            .labels
            .iter()
            .map(|l| l.len())
            .max()
            .unwrap_or(0)
            .max(5);
        out.push_str(&" ".repeat(width + 2));
        for l in &self.labels {
            out.push_str(&format!("{l:>width$} "));
        }
        out.push('\n');
        for (name, row) in self.labels.iter().zip(&self.confusion) {
            out.push_str(&format!("  {name:>width$}"));
            for v in row {
                out.push_str(&format!("{v:>width$} "));
            }
            out.push('\n');
        }
        out
    }
}

/// Computes every metric for one aligned score/label set.
pub fn evaluate(
    label_names: &[String],
    utt_ids: &[String],
    scores: &[Vec<f64>],
    labels: &[usize],
) -> Result<EvalReport> {
    check_aligned(scores, labels)?;
    if scores[0].len() != label_names.len() {
        return Err(DidError::Eval(format!(
            "score rows have {} classes, label set has {}",
            scores[0].len(),
            label_names.len()
        )));
    }
    let trials = trials_from_posteriors(utt_ids, scores, labels)?;
    Ok(EvalReport {
        accuracy: accuracy(scores, labels)?,
        eer: eer(&trials)?,
        min_cavg_x100: min_cavg_x100(scores, labels)?,
        confusion: confusion(scores, labels, label_names.len())?,
        labels: label_names.to_vec(),
        n_utterances: labels.len(),
    })
}

fn check_aligned(scores: &[Vec<f64>], labels: &[usize]) -> Result<()> {
    if scores.is_empty() {
        return Err(DidError::Eval("no utterances to evaluate".into()));
    }
    if scores.len() != labels.len() {
        return Err(DidError::Eval(format!(
            "{} score rows against {} reference labels",
            scores.len(),
            labels.len()
        )));
    }
    let l = scores[0].len();
    for (i, row) in scores.iter().enumerate() {
        if row.len() != l {
            return Err(DidError::Eval(format!(
                "score row {i} has {} classes, expected {l}",
                row.len()
            )));
        }
        if row.iter().any(|s| !s.is_finite()) {
            return Err(DidError::Eval(format!("score row {i} has a non-finite value")));
        }
    }
    for (i, &lab) in labels.iter().enumerate() {
        if lab >= l {
            return Err(DidError::Eval(format!(
                "reference label {lab} at row {i} outside {l} classes"
            )));
        }
    }
    Ok(())
}
