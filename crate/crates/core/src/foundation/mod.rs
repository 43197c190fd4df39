//! Frozen vision-transformer enhancer: class token, patch tokens and the
//! three ways of obtaining local image queries.

mod queries;
mod region;
mod vit;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub use queries::{encode, encode_on, extract_image_queries, FoundationOutput, FoundationVars, ImageQuery};
pub use region::{AttentionMask, RegionGrid};
pub use vit::{
    feature_map_to_patch_tokens, interpolate_pos_embed, patch_tokens_to_feature_map, TokenSequence,
    TokenVars, Vit,
};

/// How local image queries are extracted for `g ≥ 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QueryStrategy {
    /// One extra encoder pass per sub-image crop.
    Crop,
    /// Mean of each region's patch tokens.
    MeanPatch,
    /// Replicated class tokens under a region attention mask.
    #[default]
    MaskedClassTokens,
}

impl fmt::Display for QueryStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryStrategy::Crop => "crop",
            QueryStrategy::MeanPatch => "mean_patch",
            QueryStrategy::MaskedClassTokens => "masked_class_tokens",
        })
    }
}

impl FromStr for QueryStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crop" => Ok(QueryStrategy::Crop),
            "mean_patch" => Ok(QueryStrategy::MeanPatch),
            "masked_class_tokens" => Ok(QueryStrategy::MaskedClassTokens),
            other => Err(Error::config(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// `g` for the `g × g` sub-image split; 0 or 1 means global only.
    pub local_grid: usize,
    pub strategy: QueryStrategy,
    /// Upper bound on `1 + g²`.
    pub query_budget: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_size: 112,
            patch_size: 8,
            depth: 4,
            dim: 128,
            heads: 4,
            mlp_ratio: 2.0,
            local_grid: 2,
            strategy: QueryStrategy::MaskedClassTokens,
            query_budget: 16,
        }
    }
}

impl VitConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of image queries this configuration yields.
    pub fn query_count(&self) -> usize {
        1 + if self.local_grid >= 2 {
            self.local_grid * self.local_grid
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "{} heads do not divide width {}",
                self.heads, self.dim
            )));
        }
        if self.local_grid >= 2 && self.local_grid > self.grid() {
            return Err(Error::config(format!(
                "cannot split a {g}x{g} patch grid {l}x{l} ways",
                g = self.grid(),
                l = self.local_grid
            )));
        }
        if self.query_count() > self.query_budget {
            return Err(Error::config(format!(
                "{} image queries exceed the budget of {}",
                self.query_count(),
                self.query_budget
            )));
        }
        Ok(())
    }
}
