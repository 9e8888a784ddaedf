//! Critical-layer adversarial training.
//!
//! The crate measures how much each layer of a sequential network amplifies
//! adversarial feature deviations, picks the most critical layers, and
//! fine-tunes only those against a feature-deviation objective while the rest
//! of the network stays frozen.

pub mod error;
pub mod exec;
pub mod kernels;
pub mod metrics;
pub mod attacks;
pub mod checkpoint;
pub mod criticality;
pub mod data;
pub mod network;
pub mod rng;
pub mod stats;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use network::{
    Architecture, FeatureTaps, GradientRequest, LayerDef, LayerKind, NetGradients, Network, ParamCensus,
    PostOp,
};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
