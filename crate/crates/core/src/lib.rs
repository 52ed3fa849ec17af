//! Decentralized, knowledge-graph enhanced POI recommendation simulator.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file fix the common `f64` instantiations.

pub mod client;
pub mod dataio;
pub mod domain;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod kgstore;
pub mod neighbors;
pub mod orchestrator;
pub mod pretrain;
pub mod privacy;
pub mod propagation;
pub mod rng;
pub mod scalar;

pub use domain::{
    Activation, CategoryId, CheckInHistory, EntityId, Hyperparams, PoiCatalog, PoiId, RelationId,
    SegmentId, Triple, UserId,
};
pub use error::{Error, ErrorClass, Result};
pub use kgstore::{KnowledgeGraph, SubKnowledgeGraph};
pub use scalar::Scalar;

pub type EmbeddingStateF64 = embedding::EmbeddingState<f64>;
pub type EmbeddingStateF32 = embedding::EmbeddingState<f32>;
pub type ClientStateF64 = client::ClientState<f64>;
pub type ClientStateF32 = client::ClientState<f32>;
pub type NeighborSetF64 = neighbors::NeighborSet<f64>;
pub type GradientMessageF64 = client::GradientMessage<f64>;
