//! Straight-line reference implementations. Nothing here shares code with
//! the kernels it checks: loops are naive, Otsu runs in exact rationals.

use num_bigint::BigInt;
use num_rational::BigRational;
use ssync_core::masking::SubjectMask;
use ssync_core::{Matrix, SplitMix64};

pub fn random_matrix(rows: usize, cols: usize, rng: &mut SplitMix64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0))
}

/// Each bit set with probability `p`.
pub fn random_mask(image: usize, len: usize, p: f64, rng: &mut SplitMix64) -> SubjectMask {
    SubjectMask::new(image, (0..len).map(|_| rng.bernoulli(p)).collect())
}

pub fn matmul(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
    assert_eq!(a.cols(), b.rows());
    Matrix::from_fn(a.rows(), b.cols(), |r, c| {
        let mut s = 0.0;
        for k in 0..a.cols() {
            s += a.get(r, k) * b.get(k, c);
        }
        s
    })
}

/// `exp(l_k) / Σ_visible exp(l)`, zero where blocked. `None` if nothing is visible.
pub fn softmax(logits: &[f64], visible: &[bool]) -> Option<Vec<f64>> {
    let total: f64 = logits.iter().zip(visible).filter(|(_, &v)| v).map(|(l, _)| l.exp()).sum();
    if !visible.iter().any(|&v| v) {
        return None;
    }
    Some(
        logits
            .iter()
            .zip(visible)
            .map(|(l, &v)| if v { l.exp() / total } else { 0.0 })
            .collect(),
    )
}

pub fn bin(v: f64) -> usize {
    ((v * 256.0).floor().max(0.0) as usize).min(255)
}

fn rational(n: u64) -> BigRational {
    BigRational::from_integer(BigInt::from(n))
}

/// Exhaustive search over the 255 split points for the largest
/// `w0·w1·(μ0 − μ1)²`, in exact arithmetic. Lowest split wins ties.
pub fn otsu(values: &[f64]) -> Option<usize> {
    let mut hist = [0u64; 256];
    for &v in values {
        hist[bin(v)] += 1;
    }
    let mut best: Option<(usize, BigRational)> = None;
    for k in 0..255 {
        let (mut w0, mut s0, mut w1, mut s1) = (0u64, 0u64, 0u64, 0u64);
        for (b, &n) in hist.iter().enumerate() {
            if b <= k {
                w0 += n;
                s0 += b as u64 * n;
            } else {
                w1 += n;
                s1 += b as u64 * n;
            }
        }
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let diff = rational(s0) / rational(w0) - rational(s1) / rational(w1);
        let var = rational(w0) * rational(w1) * &diff * &diff;
        if best.as_ref().is_none_or(|(_, b)| var > *b) {
            best = Some((k, var));
        }
    }
    best.map(|(k, _)| k)
}

/// Min-max rescale, then Otsu. Constant input or a single occupied bin gives all ones.
pub fn otsu_mask(scores: &[f64]) -> Vec<bool> {
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![true; scores.len()];
    }
    let scaled: Vec<f64> = scores.iter().map(|&v| (v - lo) / (hi - lo)).collect();
    match otsu(&scaled) {
        Some(k) => scaled.iter().map(|&v| bin(v) > k).collect(),
        None => vec![true; scores.len()],
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Match {
    pub source_image: usize,
    pub source_patch: usize,
    pub target_image: usize,
    pub target_patch: usize,
    pub score: f64,
    pub selected: bool,
    pub harmonized: bool,
}

/// Every (source patch, target image) pair with its best target patch.
pub fn correspond(features: &[Matrix<f64>], masks: &[SubjectMask], tau: f64, references: Option<&[usize]>) -> Vec<Match> {
    let n = features.len();
    let mut out = Vec::new();
    for i in 0..n {
        let start = out.len();
        for r in 0..masks[i].len() {
            if !masks[i].bits[r] {
                continue;
            }
            let first = out.len();
            for j in 0..n {
                if j == i || references.is_some_and(|refs| !refs.contains(&j)) {
                    continue;
                }
                let omega: Vec<usize> = (0..masks[j].len()).filter(|&w| masks[j].bits[w]).collect();
                if omega.is_empty() {
                    continue;
                }
                let logits: Vec<f64> = omega
                    .iter()
                    .map(|&w| cosine(features[i].row(r), features[j].row(w)) / tau)
                    .collect();
                let probs = softmax(&logits, &vec![true; logits.len()]).unwrap();
                let mut arg = 0;
                for k in 0..probs.len() {
                    if probs[k] > probs[arg] {
                        arg = k;
                    }
                }
                out.push(Match {
                    source_image: i,
                    source_patch: r,
                    target_image: j,
                    target_patch: omega[arg],
                    score: probs[arg],
                    selected: false,
                    harmonized: false,
                });
            }
            let mut best = None;
            for k in first..out.len() {
                if best.is_none_or(|b: usize| out[k].score > out[b].score) {
                    best = Some(k);
                }
            }
            if let Some(b) = best {
                out[b].selected = true;
            }
        }
        let picked: Vec<usize> = (start..out.len()).filter(|&k| out[k].selected).collect();
        let scores: Vec<f64> = picked.iter().map(|&k| out[k].score).collect();
        for (&k, keep) in picked.iter().zip(otsu_mask(&scores)) {
            out[k].harmonized = keep;
        }
    }
    out
}

/// Multi-head attention of `q` over stacked `k`/`v` rows, entry by entry.
/// Returns the output and the per-head weight matrices.
pub fn attention(q: &Matrix<f64>, k: &Matrix<f64>, v: &Matrix<f64>, heads: usize, visible: &[bool]) -> (Matrix<f64>, Vec<Matrix<f64>>) {
    let hd = q.cols() / heads;
    let mut out = Matrix::zeros(q.rows(), q.cols());
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut w = Matrix::zeros(q.rows(), k.rows());
        for r in 0..q.rows() {
            let logits: Vec<f64> = (0..k.rows())
                .map(|key| {
                    let mut s = 0.0;
                    for c in h * hd..(h + 1) * hd {
                        s += q.get(r, c) * k.get(key, c);
                    }
                    s / (hd as f64).sqrt()
                })
                .collect();
            let p = softmax(&logits, visible).expect("some key visible");
            for key in 0..k.rows() {
                w.set(r, key, p[key]);
                for c in h * hd..(h + 1) * hd {
                    out.set(r, c, out.get(r, c) + p[key] * v.get(key, c));
                }
            }
        }
        weights.push(w);
    }
    (out, weights)
}

/// Keys visible to queries of image `i`: own segment, plus `masks[j]` elsewhere.
pub fn visibility(i: usize, masks: &[SubjectMask]) -> Vec<bool> {
    let mut v = Vec::new();
    for (j, m) in masks.iter().enumerate() {
        for &b in &m.bits {
            v.push(j == i || b);
        }
    }
    v
}

pub fn max_abs_diff(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
