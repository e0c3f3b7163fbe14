//! Attention hyperparameters shared by the batched, streaming and
//! speculative paths.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Elementwise kernel feature map applied to queries and keys of the linear
/// branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureMap {
    #[default]
    Relu,
    EluPlusOne,
    Identity,
}

impl FeatureMap {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            FeatureMap::Relu => x.max(T::zero()),
            FeatureMap::EluPlusOne => {
                if x >= T::zero() {
                    x + T::one()
                } else {
                    x.exp()
                }
            }
            FeatureMap::Identity => x,
        }
    }

    /// Derivative with respect to the input. ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            FeatureMap::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            FeatureMap::EluPlusOne => {
                if x >= 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            FeatureMap::Identity => 1.0,
        }
    }

    pub(crate) fn apply_slice<T: Scalar>(self, xs: &[T]) -> Vec<T> {
        xs.iter().map(|&x| self.apply(x)).collect()
    }
}

impl FromStr for FeatureMap {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "elu_plus_one" => Ok(Self::EluPlusOne),
            "identity" => Ok(Self::Identity),
            other => Err(Error::Config(format!("unknown feature map `{other}`"))),
        }
    }
}

impl fmt::Display for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Relu => "relu",
            Self::EluPlusOne => "elu_plus_one",
            Self::Identity => "identity",
        })
    }
}

/// Optional normalisation of the global linear branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GlobalScale {
    #[default]
    None,
    /// Divide by the number of key/value pairs summed into the state.
    InverseCount,
}

impl GlobalScale {
    #[inline]
    pub fn factor<T: Scalar>(self, count: usize) -> T {
        match self {
            GlobalScale::None => T::one(),
            GlobalScale::InverseCount if count == 0 => T::zero(),
            GlobalScale::InverseCount => T::one() / T::lit(count as f64),
        }
    }
}

impl FromStr for GlobalScale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "inverse_count" => Ok(Self::InverseCount),
            other => Err(Error::Config(format!("unknown global scale `{other}`"))),
        }
    }
}

impl fmt::Display for GlobalScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::InverseCount => "inverse_count",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    /// Tokens per group `G`.
    pub group_size: usize,
    /// Depthwise convolution taps `k`.
    pub conv_kernel: usize,
    /// Weight of the global linear branch.
    pub alpha: f64,
    pub feature_map: FeatureMap,
    pub global_scale: GlobalScale,
    /// Negative-control mode: the convolution window is centred on the
    /// current token and reads `⌊k/2⌋` future rows.
    pub unmasked_conv: bool,
    /// Deepest speculation tree accepted by the tree attention.
    pub max_tree_depth: usize,
}

impl Default for AttnConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 1,
            head_dim: 64,
            group_size: 64,
            conv_kernel: 63,
            alpha: 1.0,
            feature_map: FeatureMap::Relu,
            global_scale: GlobalScale::None,
            unmasked_conv: false,
            max_tree_depth: 8,
        }
    }
}

impl AttnConfig {
    /// Config for a `d_model`-wide layer split into `n_heads` heads; other
    /// fields take their defaults.
    pub fn new(d_model: usize, n_heads: usize) -> Self {
        Self {
            d_model,
            n_heads,
            head_dim: d_model.checked_div(n_heads).unwrap_or(0),
            ..Self::default()
        }
    }

    /// Single-head config of width `head_dim`.
    pub fn single_head(head_dim: usize, group_size: usize, conv_kernel: usize) -> Self {
        Self {
            d_model: head_dim,
            n_heads: 1,
            head_dim,
            group_size,
            conv_kernel,
            ..Self::default()
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_feature_map(mut self, fm: FeatureMap) -> Self {
        self.feature_map = fm;
        self
    }

    pub fn with_global_scale(mut self, gs: GlobalScale) -> Self {
        self.global_scale = gs;
        self
    }

    pub fn with_unmasked_conv(mut self, on: bool) -> Self {
        self.unmasked_conv = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.head_dim == 0 {
            return fail("n_heads and head_dim must be positive".into());
        }
        if self.d_model != self.n_heads * self.head_dim {
            return fail(format!(
                "d_model {} != n_heads {} * head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            ));
        }
        if self.group_size == 0 {
            return fail("group_size must be >= 1".into());
        }
        if self.conv_kernel == 0 {
            return fail("conv_kernel must be >= 1".into());
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return fail(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if self.max_tree_depth == 0 {
            return fail("max_tree_depth must be >= 1".into());
        }
        Ok(())
    }

    /// `1/√d_k` logit scale of the softmax branch.
    pub fn softmax_scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }
}
