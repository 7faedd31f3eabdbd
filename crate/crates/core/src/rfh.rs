//! Regional feature harmonization.
//!
//! Every subject patch of a source image is matched to its most compatible
//! foreground patch in the other images (temperature softmax over cosine
//! similarities), and matches of sufficient quality pull the source features
//! toward their correspondent with coefficient `γ`. A region is one patch token.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{dot, unit_normalize, unit_normalize_rows, Matrix};
use crate::masking::{binarize, AttentionMap, GridShape, SubjectMask, ThresholdMethod};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

/// Softmax over `ω ∈ Ω_j` of `cos(R_i(r), R_j(ω)) / τ`, in `omega_j` order.
/// `None` when `Ω_j` is empty.
pub fn compatibility<T: Scalar>(ri_row: &[T], rj: &Matrix<T>, omega_j: &[usize], tau: T) -> Result<Option<Vec<T>>> {
    if !(tau > T::zero()) {
        return Err(Error::config("temperature must be positive"));
    }
    if omega_j.is_empty() {
        return Ok(None);
    }
    if ri_row.len() != rj.cols() {
        return Err(Error::shape("region feature widths differ"));
    }
    let u = unit_normalize(ri_row)?;
    let mut logits = Vec::with_capacity(omega_j.len());
    for &w in omega_j {
        let v = unit_normalize(rj.row(w))?;
        logits.push(dot(&u, &v) / tau);
    }
    Ok(Some(softmax(&logits)))
}

fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// One (source patch, target image) match.
#[derive(Clone, Debug, PartialEq)]
pub struct Correspondence<T> {
    pub source_image: usize,
    pub source_patch: usize,
    pub target_image: usize,
    pub target_patch: usize,
    /// Compatibility of the winning patch, in `(0, 1]`.
    pub score: T,
    /// Best target image for this source patch across all candidates.
    pub selected: bool,
    /// Selected and past the correspondence-quality gate.
    pub harmonized: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrespondenceTable<T> {
    pub entries: Vec<Correspondence<T>>,
}

impl<T: Scalar> CorrespondenceTable<T> {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Selected entries of one source image.
    pub fn selected_for(&self, source: usize) -> impl Iterator<Item = &Correspondence<T>> {
        self.entries
            .iter()
            .filter(move |e| e.source_image == source && e.selected)
    }
}

/// Best match of every subject patch of every image. `references` restricts
/// the candidate target images (the subset in scalable generation); by default
/// every other image is a candidate. Ties go to the smaller patch index, then
/// the smaller image index. The harmonize flag is set per source image by
/// Otsu-thresholding the rescaled best scores of its patches.
pub fn correspond<T: Scalar>(
    features: &[Matrix<T>],
    masks: &[SubjectMask],
    tau: T,
    references: Option<&[usize]>,
) -> Result<CorrespondenceTable<T>> {
    if !(tau > T::zero()) {
        return Err(Error::config("temperature must be positive"));
    }
    if features.len() != masks.len() {
        return Err(Error::shape("one mask per feature matrix required"));
    }
    let Some(first) = features.first() else {
        return Ok(CorrespondenceTable { entries: Vec::new() });
    };
    let shape = first.shape();
    if features.iter().any(|f| f.shape() != shape) || masks.iter().any(|m| m.len() != shape.0) {
        return Err(Error::shape("region features or masks differ in shape"));
    }
    let normalized = features
        .iter()
        .map(unit_normalize_rows)
        .collect::<Result<Vec<_>>>()?;
    let omegas: Vec<Vec<usize>> = masks.iter().map(SubjectMask::indices).collect();
    let n = features.len();

    let per_source = (0..n)
        .into_par_iter()
        .map(|i| {
            let targets: Vec<usize> = match references {
                Some(refs) => refs.iter().copied().filter(|&j| j != i && j < n).collect(),
                None => (0..n).filter(|&j| j != i).collect(),
            };
            let mut rows = Vec::new();
            for &r in &omegas[i] {
                let u = normalized[i].row(r);
                let mut best: Option<(usize, T)> = None;
                let start = rows.len();
                for &j in &targets {
                    let omega = &omegas[j];
                    if omega.is_empty() {
                        continue;
                    }
                    let logits: Vec<T> = omega
                        .iter()
                        .map(|&w| dot(u, normalized[j].row(w)) / tau)
                        .collect();
                    let probs = softmax(&logits);
                    let (mut arg, mut top) = (0, probs[0]);
                    for (k, &p) in probs.iter().enumerate().skip(1) {
                        if p > top {
                            arg = k;
                            top = p;
                        }
                    }
                    if best.is_none_or(|(_, b)| top > b) {
                        best = Some((rows.len(), top));
                    }
                    rows.push(Correspondence {
                        source_image: i,
                        source_patch: r,
                        target_image: j,
                        target_patch: omega[arg],
                        score: top,
                        selected: false,
                        harmonized: false,
                    });
                }
                if let Some((idx, _)) = best {
                    debug_assert!(idx >= start);
                    rows[idx].selected = true;
                }
            }
            gate(&mut rows, i)?;
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(CorrespondenceTable {
        entries: per_source.into_iter().flatten().collect(),
    })
}

/// Flags selected rows whose score survives Otsu on the image's score spread.
fn gate<T: Scalar>(rows: &mut [Correspondence<T>], image: usize) -> Result<()> {
    let picked: Vec<usize> = rows
        .iter()
        .enumerate()
        .filter_map(|(k, r)| r.selected.then_some(k))
        .collect();
    if picked.is_empty() {
        return Ok(());
    }
    let scores = picked.iter().map(|&k| rows[k].score).collect();
    let map = AttentionMap::new(image, scores)?.rescaled();
    let keep = binarize(&map, ThresholdMethod::Otsu, GridShape::new(1, picked.len()))?;
    for (&k, &pass) in picked.iter().zip(&keep.bits) {
        rows[k].harmonized = pass;
    }
    Ok(())
}

/// Moves each harmonized subject row of `source` a fraction `γ` of the way to
/// its correspondent. Background rows and unflagged rows are left untouched;
/// with `dropout`, each candidate row is skipped with the given probability.
pub fn harmonize<T: Scalar>(
    source: usize,
    features: &[Matrix<T>],
    table: &CorrespondenceTable<T>,
    gamma: T,
    mask: &SubjectMask,
    dropout: Option<(f64, &mut SplitMix64)>,
) -> Result<Matrix<T>> {
    if !(gamma >= T::zero() && gamma <= T::one()) {
        return Err(Error::config("harmonization coefficient must lie in [0, 1]"));
    }
    let ri = features
        .get(source)
        .ok_or_else(|| Error::config(format!("image {source} outside batch")))?;
    if mask.len() != ri.rows() {
        return Err(Error::shape("mask length differs from region count"));
    }
    let mut out = ri.clone();
    if gamma == T::zero() {
        return Ok(out);
    }
    let (rate, mut rng) = match dropout {
        Some((rate, rng)) => {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
            }
            (rate, Some(rng))
        }
        None => (0.0, None),
    };
    for e in table.selected_for(source) {
        if !e.harmonized || !mask.bits[e.source_patch] {
            continue;
        }
        if let Some(r) = rng.as_deref_mut() {
            if rate > 0.0 && r.bernoulli(rate) {
                continue;
            }
        }
        let target = features
            .get(e.target_image)
            .ok_or_else(|| Error::shape("correspondence points outside the batch"))?
            .row(e.target_patch);
        for (x, &t) in out.row_mut(e.source_patch).iter_mut().zip(target) {
            *x = *x + gamma * (t - *x);
        }
    }
    Ok(out)
}
