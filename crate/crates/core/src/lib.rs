//! Traces Propagation for spiking neural networks.
//!
//! A forward-only training engine: every layer learns from a contrastive loss
//! between traces of the input signal and traces of the label signal, using
//! only information available at that layer and that time step.
//!
//! The numeric core is generic over [`Scalar`] (`f32` and `f64`). Training
//! defaults to single precision; the gradient oracle runs in double.

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod layer;
pub mod lif;
pub mod metrics;
pub mod network;
pub mod oracle;
pub mod readout;
pub mod rule;
pub mod scalar;
pub mod train;

pub use error::{Result, TpError};
pub use lif::{LifParams, MembraneState};
pub use network::{init_network, InputShape, LayerKind, LayerSpec, NetworkSpec, NetworkState, RuleConfig, TpNetwork};
pub use rule::{BatchLossSignal, Similarity, TraceState};
pub use scalar::Scalar;

pub type Network32 = TpNetwork<f32>;
pub type Network64 = TpNetwork<f64>;
pub type NetworkSpec32 = NetworkSpec<f32>;
pub type NetworkSpec64 = NetworkSpec<f64>;
pub type State32 = NetworkState<f32>;
pub type State64 = NetworkState<f64>;
pub type LifParams32 = LifParams<f32>;
pub type LifParams64 = LifParams<f64>;
