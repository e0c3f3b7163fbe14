//! Augmented grouped linear attention for autoregressive decoding.
//!
//! The crate implements a three-branch attention operator (local softmax
//! inside fixed-size groups, a grouped global linear-attention state and a
//! causally masked depthwise convolution on the values), its token-by-token
//! decoding state machine, tree-based speculative decoding on top of that
//! state, and a small transformer used to exercise all of it end to end.

#![allow(clippy::needless_range_loop)]

pub mod augmented;
pub mod bench;
pub mod cli;
pub mod config;
pub mod decode;
pub mod error;
pub mod invariants;
pub mod model;
pub mod reference;
pub mod speculative;
pub mod tensor;

pub use augmented::{AttnWeights, ConvWeights, ForwardCache};
pub use config::{AttnConfig, FeatureMap, GlobalScale};
pub use decode::DecodeState;
pub use error::{Error, Result};
pub use model::{ModelConfig, ToyModel};
pub use speculative::{SpecTree, TreeShape, VerifyResult};
pub use tensor::{Mask, Tensor};
