//! Simulation of federated training of a weight-shared supernet: clients
//! train subnetworks carved out of one shared set of weights, and the server
//! merges their updates back in.
//!
//! The pieces, bottom-up:
//!
//! * [`arch`] — the elastic search space, descriptors and slice masks.
//! * [`supernet`] — shared weights, extraction/superimposition, forward and
//!   backward passes.
//! * [`aggregation`] — overlap-aware averaging and the MaxNet scheme.
//! * [`distribution`] — which client trains which subnetwork each round.
//! * [`data`], [`client`] — datasets, non-IID partitions and local SGD.
//! * [`cost`] — communication and compute accounting.
//! * [`nas`] — post-training evolutionary search over the trained supernet.
//! * [`orchestrator`], [`checkpoint`], [`config`] — the training loop.

pub mod aggregation;
pub mod arch;
pub mod checkpoint;
pub mod client;
pub mod config;
pub mod cost;
pub mod data;
pub mod distribution;
pub mod error;
pub mod nas;
pub mod orchestrator;
pub mod seed;
pub mod supernet;
pub mod tensor;

pub use aggregation::{BetaSchedule, ClientUpdate, DecayKind};
pub use arch::{ArchDescriptor, SliceMask, SpaceConfig};
pub use checkpoint::Checkpoint;
pub use config::{AggregatorKind, ExperimentConfig};
pub use cost::CostLedger;
pub use data::{ClientPartition, Dataset};
pub use distribution::{Heuristic, RoundPlan, TrackingState};
pub use error::{Error, Result};
pub use orchestrator::{MetricsRow, Simulation};
pub use supernet::{ParamSet, SubnetWeights};
pub use tensor::Tensor;
