//! Proxy metrics over final embeddings and masks.

use crate::linalg::{cosine, Matrix};
use crate::masking::SubjectMask;
use crate::scalar::Scalar;

/// Summary of one run. `None` marks a metric that is undefined for the run
/// (e.g. every subject mask empty, or fewer than two images).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub subject_consistency: Option<f64>,
    pub layout_diversity: Option<f64>,
    pub background_drift: Option<f64>,
    pub mask_iou_vs_planted: Option<f64>,
    /// Image pairs skipped by the pooled-cosine metrics.
    pub skipped_pairs: usize,
}

impl MetricReport {
    pub fn compute<T: Scalar>(embeddings: &[Matrix<T>], masks: &[SubjectMask], planted: &[SubjectMask]) -> Self {
        let subject = subject_consistency(embeddings, masks);
        let background: Vec<SubjectMask> = masks.iter().map(complement).collect();
        let drift = pooled_pairwise_cosine(embeddings, &background);
        Self {
            subject_consistency: subject.value.map(Scalar::as_f64),
            layout_diversity: layout_diversity(masks),
            background_drift: drift.value.map(Scalar::as_f64),
            mask_iou_vs_planted: mask_recovery(masks, planted),
            skipped_pairs: subject.skipped + drift.skipped,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairwiseScore<T> {
    pub value: Option<T>,
    pub skipped: usize,
}

/// `|a ∧ b| / |a ∨ b|`, 1.0 when both are empty.
pub fn mask_iou(a: &SubjectMask, b: &SubjectMask) -> f64 {
    assert_eq!(a.len(), b.len(), "masks differ in length");
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn complement(m: &SubjectMask) -> SubjectMask {
    SubjectMask::new(m.image, m.bits.iter().map(|&b| !b).collect())
}

/// Mean of the masked rows; `None` for an empty mask.
pub fn pooled<T: Scalar>(embedding: &Matrix<T>, mask: &SubjectMask) -> Option<Vec<T>> {
    let count = mask.count();
    if count == 0 {
        return None;
    }
    let mut acc = vec![T::zero(); embedding.cols()];
    for p in mask.indices() {
        for (a, &v) in acc.iter_mut().zip(embedding.row(p)) {
            *a += v;
        }
    }
    let n = T::from_usize(count).expect("count");
    Some(acc.into_iter().map(|a| a / n).collect())
}

/// Mean pairwise cosine of mask-pooled embeddings. Pairs where either side
/// pools to nothing (or to a zero vector) are skipped and counted.
pub fn pooled_pairwise_cosine<T: Scalar>(embeddings: &[Matrix<T>], masks: &[SubjectMask]) -> PairwiseScore<T> {
    assert_eq!(embeddings.len(), masks.len(), "one mask per image");
    let pools: Vec<Option<Vec<T>>> = embeddings.iter().zip(masks).map(|(e, m)| pooled(e, m)).collect();
    let (mut sum, mut used, mut skipped) = (T::zero(), 0usize, 0usize);
    for i in 0..pools.len() {
        for j in i + 1..pools.len() {
            match (&pools[i], &pools[j]) {
                (Some(a), Some(b)) => match cosine(a, b) {
                    Ok(c) => {
                        sum += c;
                        used += 1;
                    }
                    Err(_) => skipped += 1,
                },
                _ => skipped += 1,
            }
        }
    }
    PairwiseScore {
        value: (used > 0).then(|| sum / T::from_usize(used).expect("count")),
        skipped,
    }
}

pub fn subject_consistency<T: Scalar>(embeddings: &[Matrix<T>], masks: &[SubjectMask]) -> PairwiseScore<T> {
    pooled_pairwise_cosine(embeddings, masks)
}

/// Mean pairwise `1 − IoU` of the subject masks.
pub fn layout_diversity(masks: &[SubjectMask]) -> Option<f64> {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..masks.len() {
        for j in i + 1..masks.len() {
            sum += 1.0 - mask_iou(&masks[i], &masks[j]);
            pairs += 1;
        }
    }
    (pairs > 0).then(|| sum / pairs as f64)
}

/// Mean IoU of extracted masks against the planted ground truth.
pub fn mask_recovery(masks: &[SubjectMask], planted: &[SubjectMask]) -> Option<f64> {
    if masks.is_empty() || masks.len() != planted.len() {
        return None;
    }
    Some(masks.iter().zip(planted).map(|(m, p)| mask_iou(m, p)).sum::<f64>() / masks.len() as f64)
}
