//! The channel-scaled encoder-decoder family: plans, instances, accounting
//! and checkpoints.

pub mod capacity;
pub mod checkpoint;
pub mod network;
pub mod plan;

pub use capacity::{capacity, capacity_for_patch, CapacityReport};
pub use checkpoint::{checkpoint_hash, load_checkpoint, save_checkpoint, CheckpointError};
pub use network::{ForwardTrace, Gradients, Layer, Network, Sgd};
pub use plan::{LayerDesc, LayerKind, NetworkPlan, Scale, Topology};
