//! Data-generating processes, quadrature oracles and the Monte-Carlo
//! replication harness.

mod dgp;
mod glim;
mod harness;
mod oracle;

pub use dgp::{generate_dgp4, oracle_att, Dgp4Params, Dgp4Sample, Latent, PropensityForm};
pub use glim::{generate_glim, GlimLatent, GlimParams, GlimSample, GlimVariant};
pub use harness::{run_replications, DgpSpec, ReplicateRecord, ReplicationOutput, ReplicationSummary, Scenario};
pub use oracle::OracleSurfaces;
