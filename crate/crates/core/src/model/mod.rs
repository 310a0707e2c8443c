//! The depth network: a small convolutional encoder-decoder with an
//! attention stage that folds persistent memory tokens into the current
//! frame's features.
//!
//! Geometry: images are [3, h, w]; the encoder downsamples by
//! `stride_product` to a token grid [c, h', w']; the decoder mirrors the
//! downsampling with `decoder_scales` upsampling stages and emits depth at
//! full resolution through a bounded head. Memory consists of
//! `memory_length` visual tokens shaped like encoder features plus one
//! displacement map per token at full resolution.

mod blocks;
mod params;

pub use blocks::{
    decode, encode, full_forward, fuse_cross_attention, memory_self_attention, pos_encode,
    token_sequence, ForwardOutput, ForwardSwitches,
};
pub use params::MountedParams;

use indexmap::IndexMap;

use crate::config::{ConfigError, KvMap};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("image extents {h}x{w} not divisible by stride product {stride}")]
    BadExtents { h: usize, w: usize, stride: usize },
}

/// Hyperparameters that fix every tensor shape in the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    /// Channels of encoder features and memory tokens.
    pub token_channels: usize,
    /// Total spatial downsampling of the encoder; a power of two.
    pub stride_product: usize,
    /// Attention heads; must divide `token_channels`.
    pub heads: usize,
    /// Upsampling stages in the decoder; must equal log2(stride_product).
    pub decoder_scales: usize,
    /// Upper bound of the depth head's output range.
    pub max_depth: f64,
    /// Floor applied before logarithms and divisions.
    pub depth_eps: f64,
    /// Number of memory token pairs kept.
    pub memory_length: usize,
    /// Step size of the memory token update.
    pub memory_lr: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            token_channels: 32,
            stride_product: 8,
            heads: 4,
            decoder_scales: 3,
            max_depth: 20.0,
            depth_eps: 1e-6,
            memory_length: 4,
            memory_lr: 0.05,
        }
    }
}

pub const ARCH_KEYS: [&str; 8] = [
    "token_channels",
    "stride_product",
    "heads",
    "decoder_scales",
    "max_depth",
    "depth_eps",
    "memory_length",
    "memory_lr",
];

impl ArchConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let c = self.token_channels;
        let s = self.stride_product;
        if !s.is_power_of_two() || s < 2 {
            return Err(ModelError::Config(format!(
                "stride_product must be a power of two >= 2, got {s}"
            )));
        }
        if self.decoder_scales != s.trailing_zeros() as usize {
            return Err(ModelError::Config(format!(
                "decoder_scales must equal log2(stride_product) = {}, got {}",
                s.trailing_zeros(),
                self.decoder_scales
            )));
        }
        if self.heads == 0 || c % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "heads ({}) must divide token_channels ({c})",
                self.heads
            )));
        }
        if c < 2 || c % 2 != 0 {
            return Err(ModelError::Config(format!(
                "token_channels must be even and >= 2, got {c}"
            )));
        }
        if self.memory_length == 0 {
            return Err(ModelError::Config("memory_length must be >= 1".into()));
        }
        if !(self.max_depth > 0.0) || !(self.depth_eps > 0.0) {
            return Err(ModelError::Config(
                "max_depth and depth_eps must be positive".into(),
            ));
        }
        // zero turns the refinement into a no-op (tokens slide unchanged),
        // which stays a legal operating point
        if !(self.memory_lr >= 0.0) || !self.memory_lr.is_finite() {
            return Err(ModelError::Config(
                "memory_lr must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Token grid extents for an image of `h` x `w` pixels.
    pub fn token_grid(&self, h: usize, w: usize) -> Result<(usize, usize), ModelError> {
        if h % self.stride_product != 0 || w % self.stride_product != 0 || h == 0 || w == 0 {
            return Err(ModelError::BadExtents {
                h,
                w,
                stride: self.stride_product,
            });
        }
        Ok((h / self.stride_product, w / self.stride_product))
    }

    /// Channel width of decoder stage `j` and of the carry tensor it eats.
    pub fn stage_channels(&self, j: usize) -> usize {
        (self.token_channels >> (j + 1)).max(4)
    }

    /// Overrides fields from the map; unknown keys are rejected.
    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<(), ConfigError> {
        kv.reject_unknown(&ARCH_KEYS)?;
        if let Some(v) = kv.get_parsed("token_channels", "integer")? {
            self.token_channels = v;
        }
        if let Some(v) = kv.get_parsed("stride_product", "integer")? {
            self.stride_product = v;
            // keep the invariant unless the file also pins decoder_scales
            if !kv.contains("decoder_scales") {
                self.decoder_scales = self.stride_product.trailing_zeros() as usize;
            }
        }
        if let Some(v) = kv.get_parsed("heads", "integer")? {
            self.heads = v;
        }
        if let Some(v) = kv.get_parsed("decoder_scales", "integer")? {
            self.decoder_scales = v;
        }
        if let Some(v) = kv.get_parsed("max_depth", "float")? {
            self.max_depth = v;
        }
        if let Some(v) = kv.get_parsed("depth_eps", "float")? {
            self.depth_eps = v;
        }
        if let Some(v) = kv.get_parsed("memory_length", "integer")? {
            self.memory_length = v;
        }
        if let Some(v) = kv.get_parsed("memory_lr", "float")? {
            self.memory_lr = v;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("token_channels", self.token_channels);
        kv.set("stride_product", self.stride_product);
        kv.set("heads", self.heads);
        kv.set("decoder_scales", self.decoder_scales);
        kv.set("max_depth", self.max_depth);
        kv.set("depth_eps", self.depth_eps);
        kv.set("memory_length", self.memory_length);
        kv.set("memory_lr", self.memory_lr);
        kv
    }
}

/// Named parameter store in a fixed iteration order. The order is the
/// initialization draw order and the checkpoint blob order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar> {
    arch: ArchConfig,
    map: IndexMap<String, Tensor<T>>,
}
