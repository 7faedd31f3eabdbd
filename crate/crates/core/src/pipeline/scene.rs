//! Synthetic scenes: initial patch embeddings with planted subject rectangles
//! and per-image prompt tokens.

use crate::error::{Error, Result};
use crate::linalg::{unit_normalize, Matrix};
use crate::masking::SubjectMask;
use crate::rng::{tags, SplitMix64};

use super::config::RunConfig;

/// Axis-aligned patch rectangle, `[top, top + height) × [left, left + width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.top + self.height).contains(&row) && (self.left..self.left + self.width).contains(&col)
    }

    fn overlaps(&self, other: &Rect) -> bool {
        self.top < other.top + other.height
            && other.top < self.top + self.height
            && self.left < other.left + other.width
            && other.left < self.left + self.width
    }
}

/// Prompt tokens of one image: subject tokens first, then the image's
/// context token, then a shared filler token.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub tokens: Matrix<f64>,
    pub subjects: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub initial: Vec<Matrix<f64>>,
    pub prompts: Vec<Prompt>,
    /// `rects[i][s]`: subject `s` of image `i`.
    pub rects: Vec<Vec<Rect>>,
    /// Union of the planted rectangles per image.
    pub planted: Vec<SubjectMask>,
    pub subject_dirs: Vec<Vec<f64>>,
}

pub(crate) fn random_unit(d: usize, rng: &mut SplitMix64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        if let Ok(u) = unit_normalize(&v) {
            return u;
        }
    }
}

fn place_rects(config: &RunConfig, rng: &mut SplitMix64) -> Result<Vec<Rect>> {
    let (h, w) = (config.grid_height, config.grid_width);
    let mut rects: Vec<Rect> = Vec::with_capacity(config.num_subjects);
    for _ in 0..config.num_subjects {
        let mut placed = None;
        for _ in 0..10_000 {
            let height = rng.range_inclusive(RunConfig::min_side(h), RunConfig::max_side(h)).min(h);
            let width = rng.range_inclusive(RunConfig::min_side(w), RunConfig::max_side(w)).min(w);
            let rect = Rect {
                top: rng.range_inclusive(0, h - height),
                left: rng.range_inclusive(0, w - width),
                height,
                width,
            };
            if rects.iter().all(|r| !r.overlaps(&rect)) {
                placed = Some(rect);
                break;
            }
        }
        rects.push(placed.ok_or_else(|| Error::config("could not place disjoint subject rectangles"))?);
    }
    Ok(rects)
}

fn weighted_sum(parts: &[(f64, &[f64])], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for &(w, v) in parts {
        for (o, &x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    out
}

impl Scene {
    pub fn generate(config: &RunConfig) -> Result<Self> {
        let d = config.embed_dim;
        let n = config.num_images;
        let mut prompt_rng = SplitMix64::for_purpose(config.seed, tags::PROMPT);
        let subject_dirs: Vec<Vec<f64>> = (0..config.num_subjects).map(|_| random_unit(d, &mut prompt_rng)).collect();
        let contexts: Vec<Vec<f64>> = (0..n).map(|_| random_unit(d, &mut prompt_rng)).collect();
        let filler = random_unit(d, &mut prompt_rng);

        let mut rng = SplitMix64::for_purpose(config.seed, tags::SCENE);
        let (gh, gw) = (config.grid_height, config.grid_width);
        let mut scene = Scene {
            initial: Vec::with_capacity(n),
            prompts: Vec::with_capacity(n),
            rects: Vec::with_capacity(n),
            planted: Vec::with_capacity(n),
            subject_dirs,
        };
        for i in 0..n {
            let rects = place_rects(config, &mut rng)?;
            let appearance: Vec<Vec<f64>> = (0..config.num_subjects).map(|_| random_unit(d, &mut rng)).collect();
            let mut rows = Vec::with_capacity(gh * gw);
            let mut bits = Vec::with_capacity(gh * gw);
            for r in 0..gh {
                for c in 0..gw {
                    let noise = random_unit(d, &mut rng);
                    let owner = rects.iter().position(|rect| rect.contains(r, c));
                    let raw = match owner {
                        Some(s) => weighted_sum(
                            &[
                                (1.0, &noise),
                                (config.subject_strength, &scene.subject_dirs[s]),
                                (config.appearance_strength, &appearance[s]),
                            ],
                            d,
                        ),
                        None => weighted_sum(&[(1.0, &noise), (config.background_strength, &contexts[i])], d),
                    };
                    rows.push(unit_normalize(&raw)?);
                    bits.push(owner.is_some());
                }
            }
            let mut tokens: Vec<Vec<f64>> = scene.subject_dirs.clone();
            tokens.push(contexts[i].clone());
            tokens.push(filler.clone());
            scene.initial.push(Matrix::from_rows(&rows)?);
            scene.prompts.push(Prompt {
                tokens: Matrix::from_rows(&tokens)?,
                subjects: config.num_subjects,
            });
            scene.rects.push(rects);
            scene.planted.push(SubjectMask::new(i, bits));
        }
        Ok(scene)
    }
}
