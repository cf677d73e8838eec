//! Detection of unusual crowd events from call detail records.

pub mod cluster;
pub mod eval;
pub mod events;
pub mod geometry;
pub mod ingest;
pub mod miner;
pub mod model;
pub mod oracle;
pub mod pipeline;
pub mod profile;
pub mod synth;

pub use cluster::{cluster_stream, ClusterDb, CylindricalCluster};
pub use events::{build_events, UnusualEvent};
pub use ingest::{AntennaRegistry, CallIndex, IngestReport};
pub use miner::{mine_closed_crowds, Crowd, MiningLimits};
pub use model::{validate_params, AntennaIdx, Call, Params, TimeGrid, UserIdx, UserTable};
pub use pipeline::{run, Dataset, RunArtifacts, RunOptions};
pub use profile::{build_profiles, ProfileStore};
