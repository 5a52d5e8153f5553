//! Causal spherical hypergraph networks.
//!
//! Nodes are embedded on the unit sphere with a von Mises–Fisher
//! concentration, exchange messages through angular attention inside
//! hyperedges, receive an extra message from their Granger-causal parents and
//! are classified by a linear head. The crate also contains the numerics
//! this needs (Bessel functions, least squares, F tests), a synthetic data
//! generator with planted causal edges and the evaluation metrics.

pub mod eval;
pub mod gradcheck;
pub mod granger;
pub mod hypergraph;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod train;
pub mod vmf;

pub use granger::{CausalEdge, CausalGraph, FeatureReduction, GrangerConfig};
pub use hypergraph::{Dataset, Hyperedge, IncidenceIndex, NodeFeatureSeries, Splits};
pub use linalg::Matrix;
pub use model::{ForwardTrace, ModelConfig, ModelParams, PreparedGraph, SphericalEmbedding};
pub use train::{Checkpoint, LossBreakdown, RunConfig, TrainConfig};
pub use vmf::VmfParams;

/// Derives a component seed from the run seed: `seed + FNV-1a(tag)`.
pub fn subseed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    seed.wrapping_add(h)
}
