//! Positive-class F1, macro F1 over two classes, and nDCG@k.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {preds} predictions vs {gold} gold labels")]
    LengthMismatch { preds: usize, gold: usize },
    #[error("binary metric got class {0}, expected 0 or 1")]
    NotBinary(usize),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("example {example}: label id {label} outside {n_labels} scored labels")]
    UnscoredLabel {
        example: usize,
        label: usize,
        n_labels: usize,
    },
}

/// What a ratio with a zero denominator evaluates to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZeroDivision {
    #[default]
    Zero,
    One,
}

impl ZeroDivision {
    fn value(self) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::One => 1.0,
        }
    }
}

/// How examples with an empty gold set enter the nDCG mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmptyGold {
    /// Scored 0 and counted.
    #[default]
    CountAsZero,
    /// Left out of the mean.
    Skip,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Counts with the roles of the two classes swapped.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }

    pub fn f1(&self, zero_division: ZeroDivision) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if self.tp == 0 {
            // P + R = 0 (or undefined): no true positives at all.
            return if denom == 0 { zero_division.value() } else { 0.0 };
        }
        2.0 * self.tp as f64 / denom as f64
    }
}

fn check_binary(preds: &[usize], gold: &[usize]) -> Result<(), MetricsError> {
    if preds.len() != gold.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            gold: gold.len(),
        });
    }
    if let Some(&bad) = preds.iter().chain(gold).find(|&&c| c > 1) {
        return Err(MetricsError::NotBinary(bad));
    }
    Ok(())
}

pub fn confusion(
    preds: &[usize],
    gold: &[usize],
    positive_class: usize,
) -> Result<ConfusionCounts, MetricsError> {
    check_binary(preds, gold)?;
    if positive_class > 1 {
        return Err(MetricsError::NotBinary(positive_class));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in preds.iter().zip(gold) {
        match (p == positive_class, g == positive_class) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// F1 of `positive_class`; zero when precision and recall are both zero.
pub fn binary_f1(preds: &[usize], gold: &[usize], positive_class: usize) -> Result<f64, MetricsError> {
    binary_f1_with(preds, gold, positive_class, ZeroDivision::Zero)
}

pub fn binary_f1_with(
    preds: &[usize],
    gold: &[usize],
    positive_class: usize,
    zero_division: ZeroDivision,
) -> Result<f64, MetricsError> {
    Ok(confusion(preds, gold, positive_class)?.f1(zero_division))
}

/// Unweighted mean of the two per-class F1 scores.
pub fn mean_f1(preds: &[usize], gold: &[usize]) -> Result<f64, MetricsError> {
    mean_f1_with(preds, gold, ZeroDivision::Zero)
}

pub fn mean_f1_with(preds: &[usize], gold: &[usize], zero_division: ZeroDivision) -> Result<f64, MetricsError> {
    let c = confusion(preds, gold, 1)?;
    Ok(0.5 * (c.f1(zero_division) + c.swapped().f1(zero_division)))
}

/// Label ids sorted by descending score, ties broken by ascending id.
pub fn rank_labels(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// nDCG@k of one ranking against a gold set, `None` for an empty gold set.
pub fn ndcg_single(scores: &[f64], gold: &[usize], k: usize) -> Option<f64> {
    if gold.is_empty() {
        return None;
    }
    let ranking = rank_labels(scores);
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, l)| gold.contains(l))
        .map(|(i, _)| discount(i + 1))
        .sum();
    let ideal: f64 = (1..=k.min(gold.len())).map(discount).sum();
    Some(dcg / ideal)
}

/// Mean nDCG@k with binary relevance.
pub fn ndcg_at_k(scores: &[Vec<f64>], gold: &[Vec<usize>], k: usize) -> Result<f64, MetricsError> {
    ndcg_at_k_with(scores, gold, k, EmptyGold::CountAsZero)
}

pub fn ndcg_at_k_with(
    scores: &[Vec<f64>],
    gold: &[Vec<usize>],
    k: usize,
    empty_gold: EmptyGold,
) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    if scores.len() != gold.len() {
        return Err(MetricsError::LengthMismatch {
            preds: scores.len(),
            gold: gold.len(),
        });
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for (i, (s, g)) in scores.iter().zip(gold).enumerate() {
        if let Some(&label) = g.iter().find(|&&l| l >= s.len()) {
            return Err(MetricsError::UnscoredLabel {
                example: i,
                label,
                n_labels: s.len(),
            });
        }
        match ndcg_single(s, g, k) {
            Some(v) => {
                total += v;
                counted += 1;
            }
            None if empty_gold == EmptyGold::CountAsZero => counted += 1,
            None => {}
        }
    }
    Ok(if counted == 0 { 0.0 } else { total / counted as f64 })
}
