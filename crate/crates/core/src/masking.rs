//! Subject masks from cross-attention maps, propagation masks, mask dropout.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::AdditiveMask;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

/// Patch grid of one image; patches are indexed row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
}

impl GridShape {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn patches(&self) -> usize {
        self.height * self.width
    }
}

/// Nonnegative per-patch attention scores for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<T> {
    pub image: usize,
    pub scores: Vec<T>,
}

impl<T: Scalar> AttentionMap<T> {
    pub fn new(image: usize, scores: Vec<T>) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite() || *s < T::zero()) {
            return Err(Error::config("attention scores must be finite and nonnegative"));
        }
        Ok(Self { image, scores })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Min-max rescale to `[0, 1]`. A constant map rescales to all ones.
    pub fn rescaled(&self) -> Self {
        let (lo, hi) = self
            .scores
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let span = hi - lo;
        let scores = if span > T::zero() {
            self.scores.iter().map(|&v| (v - lo) / span).collect()
        } else {
            vec![T::one(); self.scores.len()]
        };
        Self {
            image: self.image,
            scores,
        }
    }

    pub fn is_constant(&self) -> bool {
        self.scores.windows(2).all(|w| w[0] == w[1])
    }
}

/// Binary per-patch subject indicator.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SubjectMask {
    pub image: usize,
    pub bits: Vec<bool>,
}

impl SubjectMask {
    pub fn new(image: usize, bits: Vec<bool>) -> Self {
        Self { image, bits }
    }

    pub fn full(image: usize, len: usize) -> Self {
        Self::new(image, vec![true; len])
    }

    pub fn empty(image: usize, len: usize) -> Self {
        Self::new(image, vec![false; len])
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    /// Binary PGM (P5, maxval 255): 255 marks subject patches.
    pub fn to_pgm(&self, grid: GridShape) -> Result<Vec<u8>> {
        if grid.patches() != self.len() {
            return Err(Error::shape(format!(
                "mask of {} patches on a {}x{} grid",
                self.len(),
                grid.height,
                grid.width
            )));
        }
        let mut out = format!("P5\n{} {}\n255\n", grid.width, grid.height).into_bytes();
        out.extend(self.bits.iter().map(|&b| if b { 255u8 } else { 0u8 }));
        Ok(out)
    }
}

/// Visibility of every key in the stacked batch for queries of one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PropagationMask {
    pub image: usize,
    pub patches_per_image: usize,
    pub visible: AdditiveMask,
}

impl PropagationMask {
    pub fn segment(&self, j: usize) -> &[bool] {
        let p = self.patches_per_image;
        &self.visible.visible()[j * p..(j + 1) * p]
    }

    pub fn num_images(&self) -> usize {
        self.visible.len() / self.patches_per_image.max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMethod {
    Otsu,
    Niblack,
    Sauvola,
    AdaptiveMean,
}

impl ThresholdMethod {
    pub const ALL: [ThresholdMethod; 4] = [
        ThresholdMethod::Otsu,
        ThresholdMethod::Niblack,
        ThresholdMethod::Sauvola,
        ThresholdMethod::AdaptiveMean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ThresholdMethod::Otsu => "otsu",
            ThresholdMethod::Niblack => "niblack",
            ThresholdMethod::Sauvola => "sauvola",
            ThresholdMethod::AdaptiveMean => "adaptive_mean",
        }
    }
}

impl fmt::Display for ThresholdMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ThresholdMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown threshold method {s:?}")))
    }
}

pub const NIBLACK_K: f64 = -0.2;
pub const SAUVOLA_K: f64 = 0.2;
pub const SAUVOLA_R: f64 = 0.5;
pub const OTSU_BINS: usize = 256;

/// Averages each subject's maps over layers, sums over subjects, then
/// min-max rescales. `per_layer[l][s]` is subject `s` in layer `l`.
pub fn aggregate_subject_maps<T: Scalar>(per_layer: &[Vec<AttentionMap<T>>]) -> Result<AttentionMap<T>> {
    let first = per_layer
        .first()
        .and_then(|l| l.first())
        .ok_or_else(|| Error::config("no cross-attention maps to aggregate"))?;
    let subjects = per_layer[0].len();
    let len = first.len();
    if per_layer
        .iter()
        .any(|l| l.len() != subjects || l.iter().any(|m| m.len() != len))
    {
        return Err(Error::shape("attention maps differ in subject count or length"));
    }
    let layers = T::from_usize(per_layer.len()).expect("layer count");
    let mut total = vec![T::zero(); len];
    for s in 0..subjects {
        let mut acc = vec![T::zero(); len];
        for layer in per_layer {
            for (a, &v) in acc.iter_mut().zip(&layer[s].scores) {
                *a += v;
            }
        }
        for (t, a) in total.iter_mut().zip(acc) {
            *t += a / layers;
        }
    }
    Ok(AttentionMap {
        image: first.image,
        scores: total,
    }
    .rescaled())
}

/// Histogram bin of a value in `[0, 1]`.
pub fn otsu_bin<T: Scalar>(v: T) -> usize {
    let b = (v.as_f64() * OTSU_BINS as f64).floor();
    if b <= 0.0 {
        0
    } else {
        (b as usize).min(OTSU_BINS - 1)
    }
}

/// Otsu threshold bin over values in `[0, 1]`: values whose bin is strictly
/// above the returned bin are foreground. Ties go to the lower threshold.
/// `None` when every value lands in one bin.
pub fn otsu_threshold<T: Scalar>(values: &[T]) -> Option<usize> {
    let mut hist = [0u64; OTSU_BINS];
    for &v in values {
        hist[otsu_bin(v)] += 1;
    }
    otsu_threshold_from_histogram(&hist)
}

/// Between-class variance compared exactly as the rational
/// `(s0·W − S·w0)² / (w0·w1)` in integer arithmetic.
pub fn otsu_threshold_from_histogram(hist: &[u64; OTSU_BINS]) -> Option<usize> {
    let total: u64 = hist.iter().sum();
    let weighted: u64 = hist.iter().enumerate().map(|(b, &n)| b as u64 * n).sum();
    let (mut w0, mut s0) = (0u64, 0u64);
    let mut best: Option<(usize, u128, u128)> = None;
    for (k, &n) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += n;
        s0 += k as u64 * n;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let diff = (s0 as i128 * total as i128 - weighted as i128 * w0 as i128).unsigned_abs();
        let num = diff * diff;
        let den = w0 as u128 * w1 as u128;
        let better = match best {
            None => true,
            Some((_, bn, bd)) => greater_fraction(num, den, bn, bd),
        };
        if better {
            best = Some((k, num, den));
        }
    }
    best.map(|(k, _, _)| k)
}

/// `a/b > c/d` for positive denominators, exact when the products fit.
fn greater_fraction(a: u128, b: u128, c: u128, d: u128) -> bool {
    match (a.checked_mul(d), c.checked_mul(b)) {
        (Some(l), Some(r)) => l > r,
        _ => (a as f64 / b as f64) > (c as f64 / d as f64),
    }
}

/// Turns a rescaled map into a binary mask. Constant maps yield all ones.
pub fn binarize<T: Scalar>(map: &AttentionMap<T>, method: ThresholdMethod, grid: GridShape) -> Result<SubjectMask> {
    if grid.patches() != map.len() {
        return Err(Error::shape(format!(
            "map of {} patches on a {}x{} grid",
            map.len(),
            grid.height,
            grid.width
        )));
    }
    if map.is_constant() {
        return Ok(SubjectMask::full(map.image, map.len()));
    }
    let bits = match method {
        ThresholdMethod::Otsu => match otsu_threshold(&map.scores) {
            Some(k) => map.scores.iter().map(|&v| otsu_bin(v) > k).collect(),
            None => vec![true; map.len()],
        },
        local => local_threshold(&map.scores, grid, local),
    };
    Ok(SubjectMask::new(map.image, bits))
}

/// 3x3-window local thresholds; windows are clipped at the grid border.
fn local_threshold<T: Scalar>(scores: &[T], grid: GridShape, method: ThresholdMethod) -> Vec<bool> {
    let (h, w) = (grid.height, grid.width);
    let mut bits = Vec::with_capacity(scores.len());
    for r in 0..h {
        for c in 0..w {
            let (mut sum, mut sq, mut n) = (0.0f64, 0.0f64, 0.0f64);
            for rr in r.saturating_sub(1)..(r + 2).min(h) {
                for cc in c.saturating_sub(1)..(c + 2).min(w) {
                    let v = scores[rr * w + cc].as_f64();
                    sum += v;
                    sq += v * v;
                    n += 1.0;
                }
            }
            let mean = sum / n;
            let std = (sq / n - mean * mean).max(0.0).sqrt();
            let threshold = match method {
                ThresholdMethod::Niblack => mean + NIBLACK_K * std,
                ThresholdMethod::Sauvola => mean * (1.0 + SAUVOLA_K * (std / SAUVOLA_R - 1.0)),
                ThresholdMethod::AdaptiveMean => mean,
                ThresholdMethod::Otsu => unreachable!("otsu is global"),
            };
            bits.push(scores[r * w + c].as_f64() > threshold);
        }
    }
    bits
}

/// Visibility for queries of image `i`: its own segment fully visible, every
/// other image `j` gated by `M_j`.
pub fn build_propagation_mask(i: usize, masks: &[SubjectMask]) -> Result<PropagationMask> {
    let p = masks
        .first()
        .map(SubjectMask::len)
        .ok_or_else(|| Error::config("propagation mask needs at least one image"))?;
    if i >= masks.len() {
        return Err(Error::config(format!("image {i} outside batch of {}", masks.len())));
    }
    if masks.iter().any(|m| m.len() != p) {
        return Err(Error::shape("subject masks differ in length"));
    }
    let mut visible = Vec::with_capacity(p * masks.len());
    for (j, m) in masks.iter().enumerate() {
        if j == i {
            visible.extend(std::iter::repeat_n(true, p));
        } else {
            visible.extend_from_slice(&m.bits);
        }
    }
    Ok(PropagationMask {
        image: i,
        patches_per_image: p,
        visible: AdditiveMask::new(visible),
    })
}

/// Zeroes each set entry independently with probability `rate`.
pub fn dropout_mask(mask: &SubjectMask, rate: f64, rng: &mut SplitMix64) -> Result<SubjectMask> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if rate == 0.0 {
        return Ok(mask.clone());
    }
    let bits = mask
        .bits
        .iter()
        .map(|&b| b && !rng.bernoulli(rate))
        .collect();
    Ok(SubjectMask::new(mask.image, bits))
}

/// Nearest-neighbour resampling of a map between patch grids.
pub fn upsample_nearest<T: Scalar>(map: &AttentionMap<T>, from: GridShape, to: GridShape) -> Result<AttentionMap<T>> {
    if from.patches() != map.len() {
        return Err(Error::shape("map length does not match source grid"));
    }
    let mut scores = Vec::with_capacity(to.patches());
    for r in 0..to.height {
        let sr = r * from.height / to.height;
        for c in 0..to.width {
            let sc = c * from.width / to.width;
            scores.push(map.scores[sr * from.width + sc]);
        }
    }
    Ok(AttentionMap {
        image: map.image,
        scores,
    })
}
