pub mod checks;
pub mod config;
pub mod coordination;
pub mod device;
pub mod error;
pub mod host_runtime;
pub mod ids;
pub mod metrics;
pub mod nic_cxi;
pub mod nic_ib;
pub mod scenario;
pub mod simcore;
pub mod workloads;
pub mod world;

pub use error::SimError;
pub use ids::*;
