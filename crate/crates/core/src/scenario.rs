//! Scenario files: TOML documents describing the machine, the host policy and
//! one workload, plus optional expectations checked by `run --assert`.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Deserialize;
use thiserror::Error;

use crate::checks::{handoff_violations, projection};
use crate::config::{Backend, QpOwner, SimConfig, UserPut, WaitMode, WorldSpec};
use crate::coordination::AmConfig;
use crate::device::{parse_program, DeviceStep, PeerSpec};
use crate::host_runtime::HostMode;
use crate::metrics::{MetricsReport, Value};
use crate::nic_cxi::max_prestaged_barriers_shared;
use crate::simcore::{SimTime, Trace, TraceLevel};
use crate::workloads::{self, CostModel, JacobiParams, PhaseMode};
use crate::world::{RunOutcome, RunStatus, Simulation};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation failed:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error("simulation fault: {0}")]
    Fault(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TraceSetting {
    #[default]
    Off,
    Coordination,
    Full,
}

impl From<TraceSetting> for TraceLevel {
    fn from(t: TraceSetting) -> Self {
        match t {
            TraceSetting::Off => TraceLevel::Off,
            TraceSetting::Coordination => TraceLevel::Coordination,
            TraceSetting::Full => TraceLevel::Full,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct NicSection {
    pub dwq_capacity: Option<u32>,
    pub counter_max: Option<u32>,
    pub doorbell_latency_ns: Option<u64>,
    pub nic_exec_latency_ns: Option<u64>,
    pub flush_cost_ns: Option<u64>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FabricSection {
    pub wire_latency_ns: Option<u64>,
    pub host_device_latency_ns: Option<u64>,
    pub bytes_per_ns: Option<u64>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct IbSection {
    pub wqe_build_latency_ns: Option<u64>,
    pub doorbell_latency_ns: Option<u64>,
    pub sq_size: Option<u32>,
    pub cq_size: Option<u32>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MonitorSection {
    pub mode: Option<HostMode>,
    pub poll_interval_ns: Option<u64>,
    pub per_op_overhead_ns: Option<u64>,
    pub paused_from_ns: Option<u64>,
    pub paused_until_ns: Option<u64>,
    pub fallback_lag_ns: Option<u64>,
    pub stage_ahead_slots: Option<u32>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DeviceSection {
    /// `event` (default) or `polled`.
    pub wait_mode: Option<String>,
    pub poll_interval_ns: Option<u64>,
    pub halo_bytes: Option<u32>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AmSection {
    pub args_bytes: Option<u32>,
    pub ring_slots: Option<u32>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CostsSection {
    /// Where the numbers come from, e.g. `calibrated` or `user`.
    pub source: Option<String>,
    pub host_coord_ns: Option<u64>,
    pub gpu_trigger_ns: Option<u64>,
    pub kernel_launch_ns: Option<u64>,
    pub total_compute_ns: Option<u64>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseWorkload {
    pub phases: Option<OneOrMany<u64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExhaustionWorkload {
    pub ranks_list: Option<Vec<usize>>,
    pub max_instances: Option<u32>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JacobiWorkload {
    pub ranks_list: Option<Vec<usize>>,
    pub iters: Option<u64>,
    pub compute_ns: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierWorkload {
    pub barriers: Option<u64>,
    pub max_skew_ns: Option<u64>,
    pub seeds: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmStressWorkload {
    pub messages: Option<u64>,
    pub burst: Option<u64>,
    pub handlers: Option<u32>,
    pub max_args: Option<usize>,
    pub backends: Option<Vec<Backend>>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CustomWorkload {
    /// Also run on the other backend and compare coordination projections.
    #[serde(default)]
    pub compare_backends: bool,
    /// Also run without the monitor pause and compare projections.
    #[serde(default)]
    pub compare_unpaused: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Workload {
    Custom(CustomWorkload),
    Phase(PhaseWorkload),
    Exhaustion(ExhaustionWorkload),
    Jacobi(JacobiWorkload),
    Barriers(BarrierWorkload),
    AmStress(AmStressWorkload),
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ProgramSection {
    /// Program of every rank without its own entry.
    pub default: Option<String>,
    /// Per-rank programs keyed by rank number.
    #[serde(default)]
    pub ranks: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum RankSel {
    All(String),
    One(usize),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrestageEntry {
    pub rank: RankSel,
    pub counter: String,
    pub threshold: u32,
    pub peer: String,
    pub src: String,
    pub dst: String,
    pub size: u32,
    pub flag: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QpOwnerEntry {
    pub rank: usize,
    pub peer: usize,
    pub actor: u32,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum Expectation {
    Number(f64),
    Text(String),
    Range { min: Option<f64>, max: Option<f64> },
    Approx { approx: f64, tol: f64 },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: Option<String>,
    pub description: Option<String>,
    #[serde(default)]
    pub backend: Backend,
    #[serde(default = "default_ranks")]
    pub ranks: usize,
    #[serde(default = "default_one")]
    pub ranks_per_nic: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub trace: TraceSetting,
    pub time_limit_ns: Option<u64>,
    #[serde(default)]
    pub nic: NicSection,
    #[serde(default)]
    pub fabric: FabricSection,
    #[serde(default)]
    pub ib: IbSection,
    #[serde(default)]
    pub monitor: MonitorSection,
    #[serde(default)]
    pub device: DeviceSection,
    #[serde(default)]
    pub am: AmSection,
    #[serde(default)]
    pub costs: CostsSection,
    pub workload: Workload,
    #[serde(default)]
    pub program: ProgramSection,
    #[serde(default)]
    pub handlers: BTreeMap<String, String>,
    #[serde(default)]
    pub prestage: Vec<PrestageEntry>,
    #[serde(default)]
    pub qp_owner: Vec<QpOwnerEntry>,
    #[serde(default)]
    pub expect: BTreeMap<String, Expectation>,
}

fn default_ranks() -> usize {
    2
}

fn default_one() -> u32 {
    1
}

/// Parses `text` after applying `key=value` overrides.
pub fn load(text: &str, overrides: &[(String, String)]) -> Result<Scenario, ScenarioError> {
    let direct: Result<Scenario, _> = toml::from_str(text);
    if overrides.is_empty() {
        return direct.map_err(|e| ScenarioError::Parse(e.to_string()));
    }
    direct.map_err(|e| ScenarioError::Parse(e.to_string()))?;
    let mut table: toml::Table =
        toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    for (k, v) in overrides {
        apply_override(&mut table, k, v)?;
    }
    Scenario::deserialize(toml::Value::Table(table))
        .map_err(|e| ScenarioError::Parse(format!("after overrides: {e}")))
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> Result<(String, String), ScenarioError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| ScenarioError::Parse(format!("expected key=value, got '{s}'")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn override_value(v: &str) -> toml::Value {
    let wrapped = format!("v = {v}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(v.to_string()),
    }
}

const TOP_LEVEL: &[&str] = &[
    "name",
    "description",
    "backend",
    "ranks",
    "ranks_per_nic",
    "seed",
    "trace",
    "time_limit_ns",
];

/// Dotted keys address nested tables; a bare key may name a unique key in any section.
pub fn apply_override(
    table: &mut toml::Table,
    key: &str,
    value: &str,
) -> Result<(), ScenarioError> {
    let v = override_value(value);
    let path: Vec<&str> = key.split('.').collect();
    if path.len() > 1 {
        let mut t = &mut *table;
        for seg in &path[..path.len() - 1] {
            t = t
                .entry(seg.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| {
                    ScenarioError::Parse(format!("override '{key}': '{seg}' is not a table"))
                })?;
        }
        t.insert(path[path.len() - 1].to_string(), v);
        return Ok(());
    }
    if TOP_LEVEL.contains(&key) || table.get(key).is_some_and(|x| !x.is_table()) {
        table.insert(key.to_string(), v);
        return Ok(());
    }
    let owners: Vec<String> = table
        .iter()
        .filter(|(_, t)| t.as_table().is_some_and(|t| t.contains_key(key)))
        .map(|(n, _)| n.clone())
        .collect();
    match owners.as_slice() {
        [one] => {
            table[one.as_str()]
                .as_table_mut()
                .expect("table")
                .insert(key.to_string(), v);
            Ok(())
        }
        [] if table.get("workload").is_some() => {
            // Workload parameters left at their defaults.
            table["workload"]
                .as_table_mut()
                .expect("table")
                .insert(key.to_string(), v);
            Ok(())
        }
        [] => Err(ScenarioError::Parse(format!(
            "override '{key}' matches no scenario key"
        ))),
        many => Err(ScenarioError::Parse(format!(
            "override '{key}' is ambiguous: {}",
            many.join(", ")
        ))),
    }
}

impl Scenario {
    pub fn sim_config(&self) -> SimConfig {
        let mut c = SimConfig {
            backend: self.backend,
            ranks: self.ranks,
            ranks_per_nic: self.ranks_per_nic,
            ..Default::default()
        };
        let n = &self.nic;
        set(&mut c.nic.dwq_capacity, n.dwq_capacity);
        set(&mut c.nic.counter_max, n.counter_max);
        set_ns(&mut c.nic.doorbell_latency, n.doorbell_latency_ns);
        set_ns(&mut c.nic.nic_exec_latency, n.nic_exec_latency_ns);
        set_ns(&mut c.nic.flush_cost, n.flush_cost_ns);
        let f = &self.fabric;
        set_ns(&mut c.fabric.wire_latency, f.wire_latency_ns);
        set_ns(&mut c.fabric.host_device_latency, f.host_device_latency_ns);
        set(&mut c.fabric.bytes_per_ns, f.bytes_per_ns);
        let i = &self.ib;
        set_ns(&mut c.ib.wqe_build_latency, i.wqe_build_latency_ns);
        set_ns(&mut c.ib.doorbell_latency, i.doorbell_latency_ns);
        set(&mut c.ib.sq_size, i.sq_size);
        set(&mut c.ib.cq_size, i.cq_size);
        let m = &self.monitor;
        set(&mut c.host.mode, m.mode);
        set(&mut c.host.stage_ahead_slots, m.stage_ahead_slots);
        set_ns(&mut c.monitor.poll_interval, m.poll_interval_ns);
        set_ns(&mut c.monitor.per_op_overhead, m.per_op_overhead_ns);
        c.monitor.fallback_lag = m.fallback_lag_ns.map(SimTime);
        if let (Some(from), Some(until)) = (m.paused_from_ns, m.paused_until_ns) {
            c.monitor.pause = Some((SimTime(from), SimTime(until)));
        }
        if self.device.wait_mode.as_deref() == Some("polled") {
            c.wait_mode = WaitMode::Polled(SimTime(self.device.poll_interval_ns.unwrap_or(1_000)));
        }
        set(&mut c.halo_bytes, self.device.halo_bytes);
        c.am = AmConfig {
            args_bytes: self.am.args_bytes.unwrap_or(c.am.args_bytes),
            ring_slots: self.am.ring_slots.unwrap_or(c.am.ring_slots),
        };
        c.trace = self.trace.into();
        set_ns(&mut c.time_limit, self.time_limit_ns);
        c
    }

    pub fn costs(&self) -> CostModel {
        let mut m = CostModel::calibrated();
        let s = &self.costs;
        set_ns(&mut m.host_coord_cost, s.host_coord_ns);
        set_ns(&mut m.gpu_trigger_cost, s.gpu_trigger_ns);
        set_ns(&mut m.kernel_launch_cost, s.kernel_launch_ns);
        set_ns(&mut m.total_compute, s.total_compute_ns);
        m
    }

    fn programs(&self) -> Result<Vec<Vec<DeviceStep>>, Vec<String>> {
        let mut errs = Vec::new();
        let parse = |label: &str, src: &str, errs: &mut Vec<String>| match parse_program(
            &src.lines().collect::<Vec<_>>(),
        ) {
            Ok(p) => p,
            Err(e) => {
                errs.push(format!("{label}: {e}"));
                Vec::new()
            }
        };
        let default = self
            .program
            .default
            .as_deref()
            .map(|s| parse("program.default", s, &mut errs));
        let mut out = vec![None; self.ranks];
        for (k, src) in &self.program.ranks {
            match k.parse::<usize>() {
                Ok(r) if r < self.ranks => {
                    out[r] = Some(parse(&format!("program.ranks.{k}"), src, &mut errs))
                }
                _ => errs.push(format!(
                    "program.ranks.{k}: not a rank below {}",
                    self.ranks
                )),
            }
        }
        let progs: Vec<Vec<DeviceStep>> = out
            .into_iter()
            .enumerate()
            .map(|(r, p)| {
                p.or_else(|| default.clone()).unwrap_or_else(|| {
                    errs.push(format!("rank {r} has no program"));
                    Vec::new()
                })
            })
            .collect();
        if errs.is_empty() {
            Ok(progs)
        } else {
            Err(errs)
        }
    }

    fn handler_table(&self) -> Result<BTreeMap<u32, Vec<DeviceStep>>, Vec<String>> {
        let mut errs = Vec::new();
        let mut out = BTreeMap::new();
        for (k, src) in &self.handlers {
            let Ok(id) = k.parse::<u32>() else {
                errs.push(format!("handlers.{k}: handler ids are integers"));
                continue;
            };
            match parse_program(&src.lines().collect::<Vec<_>>()) {
                Ok(p) => {
                    out.insert(id, p);
                }
                Err(e) => errs.push(format!("handlers.{k}: {e}")),
            }
        }
        if errs.is_empty() {
            Ok(out)
        } else {
            Err(errs)
        }
    }

    /// Static checks; an empty list means the scenario is valid.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let cfg = self.sim_config();
        if self.ranks == 0 {
            errs.push("ranks must be at least 1".into());
        }
        if self.ranks_per_nic == 0 {
            errs.push("ranks_per_nic must be at least 1".into());
        }
        if cfg.monitor.poll_interval == SimTime::ZERO {
            errs.push("monitor.poll_interval_ns must be positive".into());
        }
        if cfg.host.stage_ahead_slots == 0 {
            errs.push("monitor.stage_ahead_slots must be at least 1".into());
        }
        if cfg.am.ring_slots == 0 {
            errs.push("am.ring_slots must be at least 1".into());
        }
        if let (Some(a), Some(b)) = (self.monitor.paused_from_ns, self.monitor.paused_until_ns) {
            if a > b {
                errs.push("monitor.paused_from_ns is after paused_until_ns".into());
            }
        }
        if self
            .device
            .wait_mode
            .as_deref()
            .is_some_and(|m| m != "event" && m != "polled")
        {
            errs.push("device.wait_mode must be 'event' or 'polled'".into());
        }
        let mut owners: BTreeMap<(usize, usize), u32> = BTreeMap::new();
        for o in &self.qp_owner {
            if o.rank >= self.ranks || o.peer >= self.ranks {
                errs.push(format!(
                    "qp_owner {}->{}: rank out of range",
                    o.rank, o.peer
                ));
            }
            if let Some(prev) = owners.insert((o.rank, o.peer), o.actor) {
                errs.push(format!(
                    "QP {}->{} has two owners: actors {prev} and {}",
                    o.rank, o.peer, o.actor
                ));
            }
        }
        for p in &self.prestage {
            if self.backend == Backend::Ib {
                errs.push("prestage entries need the ofi backend".into());
                break;
            }
            if p.threshold > cfg.nic.counter_max {
                errs.push(format!(
                    "prestage on counter '{}': threshold {} exceeds counter_max {}",
                    p.counter, p.threshold, cfg.nic.counter_max
                ));
            }
            if PeerSpec::parse(&p.peer).is_none() {
                errs.push(format!(
                    "prestage peer '{}' is not a rank or offset",
                    p.peer
                ));
            }
            match &p.rank {
                RankSel::One(r) if *r >= self.ranks => {
                    errs.push(format!("prestage rank {r} out of range"))
                }
                RankSel::All(s) if s != "all" => {
                    errs.push(format!("prestage rank '{s}': use a number or \"all\""))
                }
                _ => {}
            }
        }
        if let Workload::Custom(_) = self.workload {
            let handlers = match self.handler_table() {
                Ok(h) => h,
                Err(e) => {
                    errs.extend(e);
                    BTreeMap::new()
                }
            };
            let programs = match self.programs() {
                Ok(p) => p,
                Err(e) => {
                    errs.extend(e);
                    Vec::new()
                }
            };
            let mut check = |label: &str, steps: &[DeviceStep], in_handler: bool| {
                for s in steps {
                    s.walk(&mut |s| match s {
                        DeviceStep::AmSend { peer, handler, .. } => {
                            if !handlers.contains_key(handler) {
                                errs.push(format!("{label}: am_send names undefined handler {handler}"));
                            }
                            if *peer == PeerSpec::Source && !in_handler {
                                errs.push(format!("{label}: peer 'src' is only meaningful inside a handler"));
                            }
                            if let PeerSpec::Abs(q) = peer {
                                if *q >= self.ranks {
                                    errs.push(format!("{label}: peer {q} out of range"));
                                }
                            }
                        }
                        DeviceStep::Trigger { value, .. } => {
                            if self.backend == Backend::Ib {
                                errs.push(format!("{label}: trigger needs the ofi backend"));
                            } else if *value > cfg.nic.counter_max {
                                errs.push(format!("{label}: trigger value {value} exceeds counter_max {}", cfg.nic.counter_max));
                            }
                        }
                        DeviceStep::IbPut { .. } if self.backend == Backend::Ofi => {
                            errs.push(format!("{label}: ib_put creates NIC work from the device; it needs the ib backend"));
                        }
                        _ => {}
                    });
                }
            };
            for (r, p) in programs.iter().enumerate() {
                check(&format!("rank {r}"), p, false);
            }
            for (id, h) in &handlers {
                check(&format!("handler {id}"), h, true);
            }
        }
        errs.sort();
        errs.dedup();
        errs
    }

    pub fn world_spec(&self) -> Result<WorldSpec, ScenarioError> {
        let programs = self.programs().map_err(ScenarioError::Invalid)?;
        let handlers = self.handler_table().map_err(ScenarioError::Invalid)?;
        let mut spec = WorldSpec {
            programs: programs.into_iter().map(Into::into).collect(),
            handlers: handlers
                .into_iter()
                .map(|(k, v)| (k, Arc::from(v)))
                .collect(),
            ..Default::default()
        };
        for p in &self.prestage {
            let ranks: Vec<usize> = match p.rank {
                RankSel::One(r) => vec![r],
                RankSel::All(_) => (0..self.ranks).collect(),
            };
            let peer = PeerSpec::parse(&p.peer)
                .ok_or_else(|| ScenarioError::Invalid(vec![format!("bad peer '{}'", p.peer)]))?;
            for rank in ranks {
                spec.prestage.push(UserPut {
                    rank,
                    counter: p.counter.clone(),
                    threshold: p.threshold,
                    peer,
                    src: p.src.clone(),
                    dst: p.dst.clone(),
                    size: p.size,
                    flag: p.flag.clone(),
                });
            }
        }
        spec.qp_owners = self
            .qp_owner
            .iter()
            .map(|o| QpOwner {
                rank: o.rank,
                peer: o.peer,
                actor: o.actor,
            })
            .collect();
        Ok(spec)
    }

    /// Runs the workload; the trace is only kept for custom scenarios.
    pub fn run(&self) -> Result<ScenarioOutput, ScenarioError> {
        let errs = self.validate();
        if !errs.is_empty() {
            return Err(ScenarioError::Invalid(errs));
        }
        let fault = |e: crate::SimError| ScenarioError::Fault(e.to_string());
        let cfg = self.sim_config();
        let costs = self.costs();
        let mut out = ScenarioOutput::default();
        let m = &mut out.metrics;
        match &self.workload {
            Workload::Custom(w) => {
                let spec = self.world_spec()?;
                let mut c = cfg.clone();
                if w.compare_backends || w.compare_unpaused {
                    c.trace = c.trace.max(TraceLevel::Coordination);
                }
                let run = Simulation::new(c.clone(), spec.clone())
                    .map_err(fault)?
                    .run();
                if w.compare_backends {
                    let mut other = c.clone();
                    other.backend = if c.backend == Backend::Ofi {
                        Backend::Ib
                    } else {
                        Backend::Ofi
                    };
                    let o = Simulation::new(other, spec.clone()).map_err(fault)?.run();
                    let eq = o.status == run.status
                        && projection(o.trace.records()) == projection(run.trace.records());
                    run_values(&run, &mut out.metrics);
                    out.metrics
                        .set_int("projection_equal_across_backends", eq as i64);
                } else {
                    run_values(&run, &mut out.metrics);
                }
                if w.compare_unpaused {
                    let mut plain = c.clone();
                    plain.monitor.pause = None;
                    let o = Simulation::new(plain, spec).map_err(fault)?.run();
                    let eq = o.status == run.status
                        && projection(o.trace.records()) == projection(run.trace.records());
                    out.metrics.set_int("projection_equal_unpaused", eq as i64);
                }
                if c.trace != TraceLevel::Off {
                    out.metrics.set_int(
                        "handoff_violations_trace",
                        handoff_violations(run.trace.records()).len() as i64,
                    );
                }
                if let RunStatus::Fault { rank, error } = &run.status {
                    out.fault = Some(format!("rank {rank}: {error}"));
                }
                out.trace = Some(run.trace);
            }
            Workload::Phase(w) => {
                let ns = w
                    .phases
                    .as_ref()
                    .map(|p| p.to_vec())
                    .unwrap_or_else(|| vec![1, 10, 50, 100, 200]);
                let mut table = Table::new(&[
                    "phases",
                    "mode",
                    "end_time_ns",
                    "coordination_ns",
                    "per_coordination_ns",
                    "slowdown",
                    "coordination_fraction",
                ]);
                let mut host = Vec::new();
                let mut gpu = Vec::new();
                for &n in &ns {
                    host.push(
                        workloads::phase_benchmark(
                            n,
                            PhaseMode::HostDriven,
                            &costs,
                            self.ranks,
                            &cfg,
                        )
                        .map_err(fault)?,
                    );
                    gpu.push(
                        workloads::phase_benchmark(
                            n,
                            PhaseMode::GpuTriggered,
                            &costs,
                            self.ranks,
                            &cfg,
                        )
                        .map_err(fault)?,
                    );
                }
                for (label, rows) in [("host_driven", &host), ("gpu_triggered", &gpu)] {
                    let base = rows[0].end_time.nanos() as f64;
                    for r in rows.iter() {
                        table.push(vec![
                            r.phases.to_string(),
                            label.to_string(),
                            r.end_time.nanos().to_string(),
                            r.coordination_time.nanos().to_string(),
                            fmt(r.per_coordination_ns),
                            fmt(r.end_time.nanos() as f64 / base),
                            fmt(r.coordination_fraction()),
                        ]);
                    }
                }
                let (h, g) = (host.last().expect("phases"), gpu.last().expect("phases"));
                m.set_int("phases", h.phases as i64);
                m.set_float("coordination_fraction", h.coordination_fraction());
                m.set_float("host_per_coordination_ns", h.per_coordination_ns);
                m.set_float("gpu_per_coordination_ns", g.per_coordination_ns);
                m.set_float(
                    "latency_ratio",
                    h.per_coordination_ns / g.per_coordination_ns,
                );
                let gmin = gpu
                    .iter()
                    .map(|r| r.end_time)
                    .min()
                    .expect("phases")
                    .nanos() as f64;
                let gmax = gpu
                    .iter()
                    .map(|r| r.end_time)
                    .max()
                    .expect("phases")
                    .nanos() as f64;
                m.set_float("gpu_time_variation", (gmax - gmin) / gmin);
                m.set_float(
                    "host_slowdown",
                    h.end_time.nanos() as f64 / host[0].end_time.nanos() as f64,
                );
                m.set_float(
                    "gpu_slowdown",
                    g.end_time.nanos() as f64 / gpu[0].end_time.nanos() as f64,
                );
                m.set_int("host_end_time_ns", h.end_time.nanos() as i64);
                m.set_int("gpu_end_time_ns", g.end_time.nanos() as i64);
                m.set_int("total_compute_ns", costs.total_compute.nanos() as i64);
                m.status = "completed".into();
                out.table = Some(table);
            }
            Workload::Exhaustion(w) => {
                let ps = w.ranks_list.clone().unwrap_or_else(|| vec![self.ranks]);
                let mut table = Table::new(&[
                    "ranks",
                    "rounds",
                    "max_prestaged",
                    "armed",
                    "first_error",
                    "dwq_hwm",
                    "increments_hwm",
                ]);
                let single = ps.len() == 1;
                for &p in &ps {
                    let rpn = self.ranks_per_nic as usize;
                    let formula = max_prestaged_barriers_shared(
                        p,
                        cfg.nic.dwq_capacity,
                        cfg.nic.counter_max,
                        self.ranks_per_nic,
                    )
                    .map_err(fault)?;
                    let r = workloads::exhaustion_study(
                        p,
                        &cfg.nic,
                        rpn,
                        w.max_instances.unwrap_or(100_000),
                    )
                    .map_err(fault)?;
                    let suffix = if single {
                        String::new()
                    } else {
                        format!("_p{p}")
                    };
                    m.set_int(&format!("max_prestaged{suffix}"), formula as i64);
                    m.set_int(&format!("exhaustion_armed{suffix}"), r.armed as i64);
                    table.push(vec![
                        p.to_string(),
                        r.rounds.to_string(),
                        formula.to_string(),
                        r.armed.to_string(),
                        r.first_error.clone().unwrap_or_default(),
                        r.dwq_hwm.to_string(),
                        r.increments_hwm.to_string(),
                    ]);
                }
                m.status = "completed".into();
                out.table = Some(table);
            }
            Workload::Jacobi(w) => {
                let ps = w.ranks_list.clone().unwrap_or_else(|| vec![1, 2, 4, 8, 16]);
                let j = JacobiParams {
                    iters: w.iters.unwrap_or(20),
                    compute_per_iter: SimTime(w.compute_ns.unwrap_or(200_000)),
                    halo_bytes: cfg.halo_bytes,
                };
                let rows = workloads::jacobi_weak_scaling(&ps, &j, &costs, &cfg).map_err(fault)?;
                let mut table = Table::new(&[
                    "ranks",
                    "gpu_time_ns",
                    "host_time_ns",
                    "gpu_efficiency",
                    "host_efficiency",
                ]);
                let mut gap = f64::INFINITY;
                for r in &rows {
                    m.set_float(&format!("gpu_efficiency_p{}", r.ranks), r.gpu_efficiency);
                    m.set_float(&format!("host_efficiency_p{}", r.ranks), r.host_efficiency);
                    gap = gap.min(r.gpu_efficiency - r.host_efficiency);
                    table.push(vec![
                        r.ranks.to_string(),
                        r.gpu_time.nanos().to_string(),
                        r.host_time.nanos().to_string(),
                        fmt(r.gpu_efficiency),
                        fmt(r.host_efficiency),
                    ]);
                }
                m.set_float("min_efficiency_gap", gap);
                m.status = "completed".into();
                out.table = Some(table);
            }
            Workload::Barriers(w) => {
                let seeds = w.seeds.unwrap_or(1);
                let barriers = w.barriers.unwrap_or(100);
                let skew = SimTime(w.max_skew_ns.unwrap_or(0));
                let mut agg = Aggregate::default();
                for s in 0..seeds {
                    let spec = WorldSpec {
                        programs: workloads::skewed_barrier_programs(
                            self.ranks,
                            barriers,
                            skew,
                            self.seed + s,
                        )
                        .into_iter()
                        .map(Into::into)
                        .collect(),
                        ..Default::default()
                    };
                    let run = Simulation::new(cfg.clone(), spec).map_err(fault)?.run();
                    agg.add(&run, self.ranks);
                }
                agg.finish(m, seeds);
            }
            Workload::AmStress(w) => {
                let backends = w.backends.clone().unwrap_or_else(|| vec![self.backend]);
                let mut agg = Aggregate::default();
                for b in &backends {
                    let spec = workloads::am_stress_spec(
                        self.ranks,
                        w.messages.unwrap_or(1_000),
                        w.burst.unwrap_or(16),
                        w.handlers.unwrap_or(4),
                        w.max_args.unwrap_or(cfg.am.args_bytes as usize),
                        self.seed,
                    );
                    let mut c = cfg.clone();
                    c.backend = *b;
                    let run = Simulation::new(c, spec).map_err(fault)?.run();
                    agg.add(&run, self.ranks);
                }
                agg.finish(m, backends.len() as u64);
            }
        }
        Ok(out)
    }
}

fn set<T>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

fn set_ns(dst: &mut SimTime, v: Option<u64>) {
    if let Some(v) = v {
        *dst = SimTime(v);
    }
}

fn fmt(v: f64) -> String {
    Value::Float(v).to_string()
}

fn run_values(run: &RunOutcome, m: &mut MetricsReport) {
    let mut r = run.metrics.clone();
    r.values.append(&mut m.values);
    *m = r;
    for key in [
        "end_time_ns",
        "barriers",
        "violations",
        "flushes",
        "fallback_instances",
        "max_armed_barrier_entries",
        "dwq_hwm",
        "am_dispatched",
    ] {
        let v = m.get(key).expect("builtin key");
        m.set_int(key, v as i64);
    }
    m.set_int("events", run.events as i64);
}

/// Sums over several runs of one study.
#[derive(Default)]
struct Aggregate {
    runs: u64,
    completed: u64,
    barrier_trace: u64,
    handoff_trace: u64,
    report: MetricsReport,
    last_end: u64,
}

impl Aggregate {
    fn add(&mut self, run: &RunOutcome, p: usize) {
        self.runs += 1;
        self.completed += run.status.ok() as u64;
        if run.trace.level() != TraceLevel::Off {
            self.barrier_trace +=
                crate::checks::barrier_safety_violations(run.trace.records(), p).len() as u64;
            self.handoff_trace += handoff_violations(run.trace.records()).len() as u64;
        }
        let v = &mut self.report.violations;
        let o = run.metrics.violations;
        v.barrier_safety += o.barrier_safety;
        v.handoff += o.handoff;
        v.am_order += o.am_order;
        v.am_content += o.am_content;
        v.am_early += o.am_early;
        v.readiness_refused += o.readiness_refused;
        self.report.nics.extend(run.metrics.nics.iter().cloned());
        self.report.ranks.extend(run.metrics.ranks.iter().cloned());
        self.last_end = run.end_time.nanos();
        if self.report.status.is_empty() || !run.status.ok() {
            self.report.status = run.status.label();
        }
    }

    fn finish(mut self, m: &mut MetricsReport, runs: u64) {
        let r = &mut self.report;
        for key in [
            "violations",
            "barrier_safety_violations",
            "handoff_violations",
            "am_violations",
            "flushes",
            "fallback_instances",
            "max_armed_barrier_entries",
            "dwq_hwm",
            "am_dispatched",
        ] {
            let v = r.get(key).expect("builtin key");
            r.set_int(key, v as i64);
        }
        r.set_int("runs", runs as i64);
        r.set_int("completed_runs", self.completed as i64);
        r.set_int("barrier_safety_violations_trace", self.barrier_trace as i64);
        r.set_int("handoff_violations_trace", self.handoff_trace as i64);
        r.set_int("end_time_ns", self.last_end as i64);
        // Per-rank rows of several runs are not comparable; keep the scalars.
        r.ranks.clear();
        r.nics.clear();
        *m = self.report;
    }
}

/// Tabular study output.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("csv write");
        for r in &self.rows {
            w.write_record(r).expect("csv write");
        }
        String::from_utf8(w.into_inner().expect("csv flush")).expect("utf8")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.rows
                .iter()
                .map(|r| {
                    serde_json::Value::Object(
                        self.header
                            .iter()
                            .cloned()
                            .zip(r.iter().map(|c| cell(c)))
                            .collect(),
                    )
                })
                .collect(),
        )
    }
}

fn cell(c: &str) -> serde_json::Value {
    if let Ok(i) = c.parse::<i64>() {
        return i.into();
    }
    match c.parse::<f64>() {
        Ok(f) => f.into(),
        Err(_) => c.into(),
    }
}

#[derive(Debug, Default)]
pub struct ScenarioOutput {
    pub metrics: MetricsReport,
    pub table: Option<Table>,
    pub trace: Option<Trace>,
    pub fault: Option<String>,
}

impl ScenarioOutput {
    pub fn to_csv(&self) -> String {
        match &self.table {
            Some(t) => t.to_csv(),
            None if self.metrics.ranks.is_empty() => {
                let mut t = Table::new(&["key", "value"]);
                for (k, v) in &self.metrics.values {
                    t.push(vec![k.clone(), v.to_string()]);
                }
                t.to_csv()
            }
            None => self.metrics.to_csv(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut v = serde_json::to_value(&self.metrics).expect("metrics serialize");
        if let Some(t) = &self.table {
            v["table"] = t.to_json();
        }
        serde_json::to_string_pretty(&v).expect("json")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssertionResult {
    pub key: String,
    pub ok: bool,
    pub detail: String,
}

/// Checks `[expect]` entries against the run's metrics.
pub fn check_expectations(
    expect: &BTreeMap<String, Expectation>,
    m: &MetricsReport,
) -> Vec<AssertionResult> {
    expect
        .iter()
        .map(|(key, e)| {
            if key == "status" {
                let ok = matches!(e, Expectation::Text(s) if *s == m.status);
                return AssertionResult {
                    key: key.clone(),
                    ok,
                    detail: format!("status={} expected {e:?}", m.status),
                };
            }
            let Some(v) = m.get(key) else {
                return AssertionResult {
                    key: key.clone(),
                    ok: false,
                    detail: "metric missing".into(),
                };
            };
            let (ok, want) = match e {
                Expectation::Number(x) => (v == *x, format!("== {x}")),
                Expectation::Range { min, max } => (
                    min.is_none_or(|lo| v >= lo) && max.is_none_or(|hi| v <= hi),
                    format!(
                        "in [{}, {}]",
                        min.map_or("-inf".into(), |x| x.to_string()),
                        max.map_or("inf".into(), |x| x.to_string())
                    ),
                ),
                Expectation::Approx { approx, tol } => {
                    ((v - approx).abs() <= *tol, format!("{approx} +/- {tol}"))
                }
                Expectation::Text(s) => (false, format!("'{s}' (text compares only status)")),
            };
            AssertionResult {
                key: key.clone(),
                ok,
                detail: format!("{key}={} expected {want}", fmt(v)),
            }
        })
        .collect()
}
