//! Resolved simulation inputs: everything a run needs after scenario parsing.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::coordination::AmConfig;
use crate::device::{DeviceStep, PeerSpec};
use crate::host_runtime::{HostConfig, MonitorConfig};
use crate::ids::Rank;
use crate::nic_cxi::NicParams;
use crate::nic_ib::IbParams;
use crate::simcore::{FabricParams, SimTime, TraceLevel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Host pre-stages deferred work, devices trigger it.
    #[default]
    Ofi,
    /// Devices post work descriptors directly.
    Ib,
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Backend::Ofi => "ofi",
            Backend::Ib => "ib",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum WaitMode {
    /// Parked actors wake on the write that satisfies them.
    #[default]
    Event,
    /// Parked actors re-check every interval.
    Polled(SimTime),
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub backend: Backend,
    pub ranks: usize,
    pub ranks_per_nic: u32,
    pub nic: NicParams,
    pub fabric: FabricParams,
    pub ib: IbParams,
    pub monitor: MonitorConfig,
    pub host: HostConfig,
    pub wait_mode: WaitMode,
    pub am: AmConfig,
    pub halo_bytes: u32,
    pub trace: TraceLevel,
    pub time_limit: SimTime,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            backend: Backend::Ofi,
            ranks: 2,
            ranks_per_nic: 1,
            nic: NicParams::default(),
            fabric: FabricParams {
                wire_latency: SimTime(1_000),
                host_device_latency: SimTime(500),
                bytes_per_ns: 0,
            },
            ib: IbParams::default(),
            monitor: MonitorConfig::default(),
            host: HostConfig::default(),
            wait_mode: WaitMode::Event,
            am: AmConfig::default(),
            halo_bytes: 2048,
            trace: TraceLevel::Off,
            time_limit: SimTime::from_secs(100_000),
        }
    }
}

/// A host-prestaged user put, as in the halo kernel example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserPut {
    pub rank: Rank,
    pub counter: String,
    pub threshold: u32,
    pub peer: PeerSpec,
    pub src: String,
    pub dst: String,
    pub size: u32,
    /// Local completion flag.
    pub flag: Option<String>,
}

/// Explicit queue-pair ownership; by default rank r's actor owns every QP of rank r.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QpOwner {
    pub rank: Rank,
    pub peer: Rank,
    pub actor: u32,
}

#[derive(Debug, Clone, Default)]
pub struct WorldSpec {
    /// One program per rank.
    pub programs: Vec<Arc<[DeviceStep]>>,
    pub handlers: BTreeMap<u32, Arc<[DeviceStep]>>,
    pub prestage: Vec<UserPut>,
    pub qp_owners: Vec<QpOwner>,
}

impl WorldSpec {
    pub fn uniform(ranks: usize, program: Vec<DeviceStep>) -> Self {
        let p: Arc<[DeviceStep]> = program.into();
        WorldSpec {
            programs: vec![p; ranks],
            ..Default::default()
        }
    }
}
