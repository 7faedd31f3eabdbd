//! Base layout interpolation: cache the vanilla pass's self-attention inputs
//! and blend them into the consistency pass during the early timesteps.

use std::collections::BTreeMap;

use crate::dump::RawTensor;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CacheKey {
    pub t: usize,
    pub layer: usize,
    pub image: usize,
}

/// Patch embeddings recorded by the vanilla pass, keyed by (timestep, layer, image).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingCache<T> {
    entries: BTreeMap<CacheKey, Matrix<T>>,
}

impl<T: Scalar> EmbeddingCache<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, t: usize, layer: usize, image: usize, x: Matrix<T>) -> Result<()> {
        let key = CacheKey { t, layer, image };
        if self.entries.contains_key(&key) {
            return Err(Error::DuplicateEntry { t, layer, image });
        }
        self.entries.insert(key, x);
        Ok(())
    }

    pub fn fetch(&self, t: usize, layer: usize, image: usize) -> Result<&Matrix<T>> {
        self.entries
            .get(&CacheKey { t, layer, image })
            .ok_or(Error::MissingEntry { t, layer, image })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &CacheKey> {
        self.entries.keys()
    }

    /// Checks the cache holds every (t, layer, image) of the schedule with the
    /// expected matrix shape.
    pub fn verify_complete(&self, schedule: &BliSchedule<T>, images: usize, shape: (usize, usize)) -> Result<()> {
        for &t in &schedule.window {
            for &layer in &schedule.layers {
                for image in 0..images {
                    let m = self.fetch(t, layer, image)?;
                    if m.shape() != shape {
                        return Err(Error::shape(format!(
                            "cached embedding ({t}, {layer}, {image}) has shape {:?}, expected {shape:?}",
                            m.shape()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Packs the schedule's entries into a rank-5 tensor
    /// `[|window|, |layers|, images, P, d]`.
    pub fn to_tensor(&self, schedule: &BliSchedule<T>, images: usize) -> Result<RawTensor> {
        let first = self
            .entries
            .values()
            .next()
            .ok_or_else(|| Error::config("cannot export an empty cache"))?;
        let shape = first.shape();
        self.verify_complete(schedule, images, shape)?;
        let mut data = Vec::new();
        for &t in &schedule.window {
            for &layer in &schedule.layers {
                for image in 0..images {
                    data.extend(self.fetch(t, layer, image)?.data().iter().map(|v| v.as_f64()));
                }
            }
        }
        RawTensor::new(
            vec![
                schedule.window.len() as u64,
                schedule.layers.len() as u64,
                images as u64,
                shape.0 as u64,
                shape.1 as u64,
            ],
            data,
        )
    }

    pub fn from_tensor(tensor: &RawTensor, schedule: &BliSchedule<T>) -> Result<Self> {
        let dims = tensor.dims();
        if dims.len() != 5
            || dims[0] as usize != schedule.window.len()
            || dims[1] as usize != schedule.layers.len()
        {
            return Err(Error::Format(format!(
                "cache tensor dims {dims:?} do not match the schedule"
            )));
        }
        let (images, rows, cols) = (dims[2] as usize, dims[3] as usize, dims[4] as usize);
        let mut cache = Self::new();
        let mut chunks = tensor.data().chunks_exact(rows * cols);
        for &t in &schedule.window {
            for &layer in &schedule.layers {
                for image in 0..images {
                    let chunk = chunks.next().expect("length validated by RawTensor");
                    let m = Matrix::new(rows, cols, chunk.iter().map(|&v| T::lit(v)).collect())?;
                    cache.record(t, layer, image, m)?;
                }
            }
        }
        Ok(cache)
    }
}

/// Interpolation weight, the timesteps it applies to, and the layers tapped.
#[derive(Clone, Debug, PartialEq)]
pub struct BliSchedule<T> {
    pub lambda: T,
    pub window: Vec<usize>,
    pub layers: Vec<usize>,
}

impl<T: Scalar> BliSchedule<T> {
    /// Window = the first `⌈fraction · total_steps⌉` timesteps.
    pub fn new(lambda: T, window_fraction: f64, total_steps: usize, layers: Vec<usize>) -> Result<Self> {
        if !(lambda >= T::zero() && lambda <= T::one()) {
            return Err(Error::config("lambda must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&window_fraction) {
            return Err(Error::config("BLI window fraction must lie in [0, 1]"));
        }
        let steps = (window_fraction * total_steps as f64).ceil() as usize;
        Ok(Self {
            lambda,
            window: (0..steps.min(total_steps)).collect(),
            layers,
        })
    }

    pub fn applies(&self, t: usize, layer: usize) -> bool {
        self.window.contains(&t) && self.layers.contains(&layer)
    }
}

/// `(1 − λ)·x_consist + λ·x_cached`; exact at `λ = 0` and `λ = 1`.
pub fn interpolate<T: Scalar>(x_consist: &Matrix<T>, x_cached: &Matrix<T>, lambda: T) -> Result<Matrix<T>> {
    if x_consist.shape() != x_cached.shape() {
        return Err(Error::shape(format!(
            "interpolating {:?} with {:?}",
            x_consist.shape(),
            x_cached.shape()
        )));
    }
    if !(lambda >= T::zero() && lambda <= T::one()) {
        return Err(Error::config("lambda must lie in [0, 1]"));
    }
    if lambda == T::zero() {
        return Ok(x_consist.clone());
    }
    if lambda == T::one() {
        return Ok(x_cached.clone());
    }
    let keep = T::one() - lambda;
    let data = x_consist
        .data()
        .iter()
        .zip(x_cached.data())
        .map(|(&a, &b)| keep * a + lambda * b)
        .collect();
    Matrix::new(x_consist.rows(), x_consist.cols(), data)
}
