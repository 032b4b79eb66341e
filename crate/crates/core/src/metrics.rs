//! Threshold-free ranking metrics and the forgetting measure.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    Length { scores: usize, labels: usize },
    #[error("need at least one positive and one negative")]
    SingleClass,
    #[error("no positive labels")]
    NoPositives,
    #[error("non-finite score")]
    NonFinite,
    #[error("forgetting needs at least two tasks, got {0}")]
    TooFewTasks(usize),
    #[error("missing entry T[{row}][{col}]")]
    Missing { row: usize, col: usize },
}

fn check(scores: &[f64], labels: &[bool]) -> Result<(), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Length {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    Ok(())
}

/// Indices sorted by descending score.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Mann–Whitney AUROC; tied pairs count one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    // Twice the number of correctly ordered pairs, kept integral so the
    // result is independent of accumulation order.
    let order = descending(scores);
    let (mut twice, mut neg_above) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        // positives in this group beat every negative below it and tie
        // with the negatives inside it
        twice += p * (2 * (neg - neg_above - n) + n);
        neg_above += n;
        i = j;
    }
    Ok(twice as f64 / (2 * pos * neg) as f64)
}

/// Average precision, `sum_n (R_n - R_{n-1}) P_n`, one step per distinct
/// score.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    if pos == 0 {
        return Err(MetricsError::NoPositives);
    }
    let order = descending(scores);
    let (mut tp, mut fp, mut ap) = (0u64, 0u64, 0.0);
    let mut i = 0;
    while i < order.len() {
        let before = tp;
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        ap += ap_step(tp - before, tp, fp, pos);
        i = j;
    }
    Ok(ap)
}

#[inline]
pub(crate) fn ap_step(dtp: u64, tp: u64, fp: u64, pos: u64) -> f64 {
    if dtp == 0 {
        return 0.0;
    }
    (dtp as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64)
}

/// Lower-triangular performance matrix: `T[l][j]` is the metric on task
/// `j` after training through task `l`, zero-based.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerfMatrix {
    rows: Vec<Vec<Option<f64>>>,
}

impl PerfMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Row `l` has `l + 1` slots.
    pub fn with_tasks(k: usize) -> Self {
        Self {
            rows: (0..k).map(|l| vec![None; l + 1]).collect(),
        }
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    /// Sets `T[l][j]`, growing the matrix as needed. Panics if `j > l`.
    pub fn set(&mut self, l: usize, j: usize, value: f64) {
        assert!(j <= l, "T[{l}][{j}] lies above the diagonal");
        while self.rows.len() <= l {
            let n = self.rows.len();
            self.rows.push(vec![None; n + 1]);
        }
        self.rows[l][j] = Some(value);
    }

    pub fn get(&self, l: usize, j: usize) -> Option<f64> {
        self.rows.get(l).and_then(|r| r.get(j)).copied().flatten()
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.rows
    }

    /// Final row (after the last trained task).
    pub fn last_row(&self) -> Option<Vec<Option<f64>>> {
        self.rows.last().cloned()
    }
}

/// Average forgetting after training through `k` tasks (one-based count).
///
/// For each earlier task `j`, the drop from its best value over rows
/// `j..k-1` to its value in row `k`. Negative values (backward transfer)
/// are kept.
pub fn avg_fm(t: &PerfMatrix, k: usize) -> Result<f64, MetricsError> {
    if k < 2 {
        return Err(MetricsError::TooFewTasks(k));
    }
    let last = k - 1;
    let mut total = 0.0;
    for j in 0..last {
        let mut best = f64::NEG_INFINITY;
        for l in j..last {
            best = best.max(t.get(l, j).ok_or(MetricsError::Missing { row: l, col: j })?);
        }
        let fin = t.get(last, j).ok_or(MetricsError::Missing { row: last, col: j })?;
        total += best - fin;
    }
    Ok(total / last as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&x| x == 1).collect()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &b(&[0, 0, 1, 1])).unwrap(), 1.0);
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &b(&[0, 0, 1, 1])).unwrap(), 0.75);
        assert_eq!(auroc(&[0.3; 5], &b(&[0, 1, 0, 1, 1])).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1, 0.2], &b(&[1, 1])), Err(MetricsError::SingleClass));
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(aupr(&[0.9, 0.8, 0.2], &b(&[1, 1, 0])).unwrap(), 1.0);
        let ap = aupr(&[0.9, 0.8, 0.7], &b(&[1, 0, 1])).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(aupr(&[0.9, 0.8, 0.7, 0.1], &b(&[0, 0, 0, 1])).unwrap(), 0.25);
        assert_eq!(aupr(&[0.1], &b(&[0])), Err(MetricsError::NoPositives));
    }

    #[test]
    fn mismatched_lengths() {
        assert!(matches!(auroc(&[0.1], &b(&[0, 1])), Err(MetricsError::Length { .. })));
    }

    fn worked_matrix() -> PerfMatrix {
        let mut t = PerfMatrix::new();
        t.set(0, 0, 0.95);
        t.set(1, 0, 0.90);
        t.set(1, 1, 0.85);
        t.set(2, 0, 0.80);
        t.set(2, 1, 0.85);
        t.set(2, 2, 0.9);
        t
    }

    #[test]
    fn fm_worked_example() {
        let fm = avg_fm(&worked_matrix(), 3).unwrap();
        assert_eq!(fm, ((0.95 - 0.80) + (0.85 - 0.85)) / 2.0);
        assert!((fm - 0.075).abs() < 1e-15);
    }

    #[test]
    fn fm_no_forgetting_and_errors() {
        let mut t = PerfMatrix::new();
        t.set(0, 0, 0.9);
        t.set(1, 0, 0.9);
        t.set(1, 1, 0.7);
        assert_eq!(avg_fm(&t, 2).unwrap(), 0.0);
        assert_eq!(avg_fm(&t, 1), Err(MetricsError::TooFewTasks(1)));
        let mut gap = PerfMatrix::with_tasks(2);
        gap.set(1, 0, 0.5);
        assert_eq!(avg_fm(&gap, 2), Err(MetricsError::Missing { row: 0, col: 0 }));
    }

    #[test]
    fn fm_may_be_negative() {
        let mut t = PerfMatrix::new();
        t.set(0, 0, 0.5);
        t.set(1, 0, 0.7);
        t.set(1, 1, 0.7);
        assert!(avg_fm(&t, 2).unwrap() < 0.0);
    }

    fn case() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                proptest::collection::vec((0u8..6).prop_map(|v| v as f64 * 0.25), n),
                proptest::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn invariant_under_increasing_transform((s, l) in case()) {
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            if l.iter().any(|&x| x) && l.iter().any(|&x| !x) {
                prop_assert_eq!(auroc(&s, &l).unwrap(), auroc(&t, &l).unwrap());
            }
            if l.iter().any(|&x| x) {
                prop_assert_eq!(aupr(&s, &l).unwrap(), aupr(&t, &l).unwrap());
            }
        }

        #[test]
        fn auroc_complement_without_ties(
            l in proptest::collection::vec(any::<bool>(), 2..40),
            seed in any::<u64>(),
        ) {
            prop_assume!(l.iter().any(|&x| x) && l.iter().any(|&x| !x));
            let s: Vec<f64> = (0..l.len())
                .map(|i| ((i as u64).wrapping_mul(seed | 1) % 1_000_003) as f64 + i as f64 * 1e-3)
                .collect();
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            let sum = auroc(&s, &l).unwrap() + auroc(&neg, &l).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
