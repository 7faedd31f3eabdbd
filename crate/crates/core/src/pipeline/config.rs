use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{GridShape, ThresholdMethod};

/// Which consistency mechanisms the second pass applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    /// Gate sharing and harmonization with extracted subject masks; when off
    /// every mask is all ones.
    pub masks: bool,
    pub sharing: bool,
    pub rfh: bool,
    pub bli: bool,
    pub dropouts: bool,
}

impl Toggles {
    pub const ALL_ON: Toggles = Toggles {
        masks: true,
        sharing: true,
        rfh: true,
        bli: true,
        dropouts: true,
    };

    pub const ALL_OFF: Toggles = Toggles {
        masks: false,
        sharing: false,
        rfh: false,
        bli: false,
        dropouts: false,
    };

    /// True when the consistency pass cannot differ from the vanilla pass.
    pub fn is_inert(&self) -> bool {
        !(self.sharing || self.rfh || self.bli)
    }
}

/// Every tunable of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub num_images: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    /// Patch embedding width `d`.
    pub embed_dim: usize,
    /// Projection width `d_k`.
    pub proj_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub num_timesteps: usize,
    pub num_subjects: usize,
    pub seed: u64,
    /// Harmonization coefficient.
    pub gamma: f64,
    /// Layout interpolation weight.
    pub lambda: f64,
    /// Correspondence softmax temperature.
    pub tau: f64,
    /// Fraction of timesteps (from the start) that interpolate toward the cache.
    pub bli_window_fraction: f64,
    pub attn_dropout: f64,
    pub rfh_dropout: f64,
    pub mask_dropout: f64,
    pub threshold: ThresholdMethod,
    /// Reference subset for scalable generation; empty disables it.
    pub subset: Vec<usize>,
    /// Blocks whose cross-attention maps feed the masks; `null` = all.
    pub mask_layers: Option<Vec<usize>>,
    /// Blocks that run harmonization; `null` = all.
    pub rfh_layers: Option<Vec<usize>>,
    /// Blocks tapped by layout interpolation; `null` = all.
    pub bli_layers: Option<Vec<usize>>,
    /// Planted subject direction strength `β`.
    pub subject_strength: f64,
    /// Per-image subject appearance component.
    pub appearance_strength: f64,
    /// Per-image background (setting) direction strength.
    pub background_strength: f64,
    /// Positional encoding weight added to self-attention inputs.
    pub position_strength: f64,
    /// Residual weight of the prompt cross-attention update.
    pub prompt_strength: f64,
    /// Residual weight of the self-attention update.
    pub attention_strength: f64,
    pub toggles: Toggles,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            num_images: 5,
            grid_height: 16,
            grid_width: 16,
            embed_dim: 64,
            proj_dim: 64,
            num_heads: 4,
            num_blocks: 4,
            num_timesteps: 20,
            num_subjects: 1,
            seed: 0,
            gamma: 0.3,
            lambda: 0.7,
            tau: 0.1,
            bli_window_fraction: 0.4,
            attn_dropout: 0.1,
            rfh_dropout: 0.1,
            mask_dropout: 0.1,
            threshold: ThresholdMethod::Otsu,
            subset: Vec::new(),
            mask_layers: None,
            rfh_layers: None,
            bli_layers: None,
            subject_strength: 2.0,
            appearance_strength: 1.0,
            background_strength: 0.3,
            position_strength: 3.0,
            prompt_strength: 0.5,
            attention_strength: 0.2,
            toggles: Toggles::ALL_ON,
        }
    }
}

impl RunConfig {
    pub fn grid(&self) -> GridShape {
        GridShape::new(self.grid_height, self.grid_width)
    }

    pub fn patches(&self) -> usize {
        self.grid_height * self.grid_width
    }

    fn layer_set(&self, layers: &Option<Vec<usize>>) -> Vec<usize> {
        match layers {
            Some(l) => {
                let mut l = l.clone();
                l.sort_unstable();
                l.dedup();
                l
            }
            None => (0..self.num_blocks).collect(),
        }
    }

    pub fn mask_layer_set(&self) -> Vec<usize> {
        self.layer_set(&self.mask_layers)
    }

    pub fn rfh_layer_set(&self) -> Vec<usize> {
        self.layer_set(&self.rfh_layers)
    }

    pub fn bli_layer_set(&self) -> Vec<usize> {
        self.layer_set(&self.bli_layers)
    }

    /// Largest planted rectangle side for a grid dimension.
    pub(crate) fn max_side(dim: usize) -> usize {
        dim.div_ceil(3).max(1)
    }

    pub(crate) fn min_side(dim: usize) -> usize {
        dim.div_ceil(5).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_images", self.num_images),
            ("grid_height", self.grid_height),
            ("grid_width", self.grid_width),
            ("embed_dim", self.embed_dim),
            ("proj_dim", self.proj_dim),
            ("num_heads", self.num_heads),
            ("num_blocks", self.num_blocks),
            ("num_timesteps", self.num_timesteps),
            ("num_subjects", self.num_subjects),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if !self.proj_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config("proj_dim must be divisible by num_heads"));
        }
        let unit = [
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("bli_window_fraction", self.bli_window_fraction),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        for (name, v) in [
            ("attn_dropout", self.attn_dropout),
            ("rfh_dropout", self.rfh_dropout),
            ("mask_dropout", self.mask_dropout),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("tau must be positive, got {}", self.tau)));
        }
        for (name, v) in [
            ("subject_strength", self.subject_strength),
            ("appearance_strength", self.appearance_strength),
            ("background_strength", self.background_strength),
            ("position_strength", self.position_strength),
            ("prompt_strength", self.prompt_strength),
            ("attention_strength", self.attention_strength),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and nonnegative")));
            }
        }
        let area = Self::max_side(self.grid_height) * Self::max_side(self.grid_width);
        if self.num_subjects * area > self.patches() / 2 {
            return Err(Error::config(format!(
                "{} subjects do not fit disjointly on a {}x{} grid",
                self.num_subjects, self.grid_height, self.grid_width
            )));
        }
        let mut seen = vec![false; self.num_images];
        for &s in &self.subset {
            if s >= self.num_images {
                return Err(Error::config(format!("subset image {s} outside batch of {}", self.num_images)));
            }
            if std::mem::replace(&mut seen[s], true) {
                return Err(Error::config(format!("subset lists image {s} twice")));
            }
        }
        for (name, layers) in [
            ("mask_layers", &self.mask_layers),
            ("rfh_layers", &self.rfh_layers),
            ("bli_layers", &self.bli_layers),
        ] {
            if let Some(l) = layers {
                if let Some(&bad) = l.iter().find(|&&b| b >= self.num_blocks) {
                    return Err(Error::config(format!(
                        "{name} lists block {bad}, model has {}",
                        self.num_blocks
                    )));
                }
            }
        }
        if matches!(&self.mask_layers, Some(l) if l.is_empty()) {
            return Err(Error::config("mask_layers must name at least one block"));
        }
        Ok(())
    }
}
