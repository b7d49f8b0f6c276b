//! Scenario generators for the desk-scale studies: phase benchmark, resource
//! exhaustion, Jacobi weak scaling, randomized barriers and active messages.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checks::{barrier_safety_violations, handoff_violations};
use crate::config::{Backend, SimConfig, WorldSpec};
use crate::coordination::barrier_round_targets;
use crate::device::{DeviceStep, PeerSpec};
use crate::error::SimError;
use crate::host_runtime::{arm_generation, OpSpec};
use crate::ids::{NicId, RegionId};
use crate::nic_cxi::{ceil_log2, EntryClass, NicCxi, NicParams};
use crate::simcore::{Addr, SimTime, TraceLevel, WriteTag};
use crate::world::{run_uniform, RunOutcome, RunStatus, Simulation};

/// Calibrated NIC doorbell and execution shares of the GPU-triggered coordination cost.
pub const CALIBRATED_DOORBELL_NS: u64 = 30;
pub const CALIBRATED_NIC_EXEC_NS: u64 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub host_coord_cost: SimTime,
    pub gpu_trigger_cost: SimTime,
    pub kernel_launch_cost: SimTime,
    pub total_compute: SimTime,
}

impl CostModel {
    pub fn calibrated() -> Self {
        CostModel {
            host_coord_cost: SimTime(25_200),
            gpu_trigger_cost: SimTime(110),
            kernel_launch_cost: SimTime::ZERO,
            total_compute: SimTime(10_600_000),
        }
    }

    /// Simulator configuration whose single-round barrier costs `gpu_trigger_cost`.
    pub fn configure(&self, cfg: &mut SimConfig) {
        let fixed = CALIBRATED_DOORBELL_NS + CALIBRATED_NIC_EXEC_NS;
        let total = self.gpu_trigger_cost.nanos();
        let (db, exec) = if total >= fixed {
            (CALIBRATED_DOORBELL_NS, CALIBRATED_NIC_EXEC_NS)
        } else {
            (total / 2, 0)
        };
        cfg.nic.doorbell_latency = SimTime(db);
        cfg.nic.nic_exec_latency = SimTime(exec);
        cfg.fabric.wire_latency = SimTime(total - db - exec);
        cfg.ib.wqe_build_latency = SimTime::ZERO;
        cfg.ib.doorbell_latency = SimTime(db + exec);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseMode {
    HostDriven,
    GpuTriggered,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseResult {
    pub phases: u64,
    pub mode: PhaseMode,
    pub end_time: SimTime,
    pub compute_time: SimTime,
    pub coordination_time: SimTime,
    pub per_coordination_ns: f64,
}

impl PhaseResult {
    pub fn coordination_fraction(&self) -> f64 {
        self.coordination_time.nanos() as f64 / self.end_time.nanos() as f64
    }
}

/// Splits `total` over `n` phases; the first `total % n` phases get one extra nanosecond.
pub fn phase_program(total: SimTime, n: u64) -> Vec<DeviceStep> {
    let q = total.nanos() / n;
    let extra = total.nanos() % n;
    let block = |count: u64, d: u64| DeviceStep::Repeat {
        count,
        body: vec![DeviceStep::Compute(SimTime(d)), DeviceStep::BarrierAll].into(),
    };
    let mut v = Vec::new();
    if extra > 0 {
        v.push(block(extra, q + 1));
    }
    if n > extra {
        v.push(block(n - extra, q));
    }
    v
}

/// Host-driven timeline: every phase ends at a kernel boundary followed by a
/// host rendezvous that releases all ranks together.
pub fn host_driven_time(per_rank_phases: &[Vec<SimTime>], costs: &CostModel) -> (SimTime, SimTime) {
    let n = per_rank_phases.first().map_or(0, |v| v.len());
    let mut t = SimTime::ZERO;
    let mut coord = SimTime::ZERO;
    for i in 0..n {
        let arrive = per_rank_phases
            .iter()
            .map(|v| v[i])
            .max()
            .unwrap_or_default();
        t += arrive + costs.kernel_launch_cost + costs.host_coord_cost;
        coord += costs.kernel_launch_cost + costs.host_coord_cost;
    }
    (t, coord)
}

pub fn phase_benchmark(
    n: u64,
    mode: PhaseMode,
    costs: &CostModel,
    ranks: usize,
    base: &SimConfig,
) -> Result<PhaseResult, SimError> {
    assert!(n >= 1, "at least one phase");
    match mode {
        PhaseMode::HostDriven => {
            let q = costs.total_compute.nanos() / n;
            let extra = costs.total_compute.nanos() % n;
            let phases: Vec<SimTime> = (0..n).map(|i| SimTime(q + u64::from(i < extra))).collect();
            let (end, coord) = host_driven_time(&vec![phases; ranks], costs);
            Ok(PhaseResult {
                phases: n,
                mode,
                end_time: end,
                compute_time: costs.total_compute,
                coordination_time: coord,
                per_coordination_ns: coord.nanos() as f64 / n as f64,
            })
        }
        PhaseMode::GpuTriggered => {
            let mut cfg = base.clone();
            cfg.ranks = ranks;
            cfg.backend = Backend::Ofi;
            costs.configure(&mut cfg);
            let out = run_uniform(cfg, phase_program(costs.total_compute, n))?;
            expect_completed(&out)?;
            let m = &out.metrics.ranks;
            let barriers: u64 = m.iter().map(|r| r.barriers).sum();
            let lat: u64 = m.iter().map(|r| r.barrier_latency_sum_ns).sum();
            Ok(PhaseResult {
                phases: n,
                mode,
                end_time: out.end_time,
                compute_time: costs.total_compute,
                coordination_time: out.end_time - costs.total_compute,
                per_coordination_ns: lat as f64 / barriers as f64,
            })
        }
    }
}

fn expect_completed(out: &RunOutcome) -> Result<(), SimError> {
    match &out.status {
        RunStatus::Completed => Ok(()),
        RunStatus::Fault { error, .. } => Err(error.clone()),
        s => Err(SimError::IllegalStep(format!(
            "run ended with status {}",
            s.label()
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExhaustionResult {
    pub ranks: usize,
    pub rounds: u32,
    /// Whole barrier instances armed on every rank before the first failure.
    pub armed: u32,
    pub first_error: Option<String>,
    pub dwq_hwm: u32,
    pub increments_hwm: u32,
}

/// Naive arming: no monitor, no recycling. Each NIC arms whole barrier
/// instances generation by generation across its ranks until one does not fit.
pub fn exhaustion_study(
    p: usize,
    nic: &NicParams,
    ranks_per_nic: usize,
    max_instances: u32,
) -> Result<ExhaustionResult, SimError> {
    if p < 2 {
        return Err(SimError::InvalidRankCount(p));
    }
    let rounds = ceil_log2(p);
    let rpn = ranks_per_nic.max(1);
    let dummy = Addr::new(RegionId(0), 0);
    let mut armed = vec![0u32; p];
    let mut first_error = None;
    let (mut dwq_hwm, mut inc_hwm) = (0, 0);
    for (n, first) in (0..p).step_by(rpn).enumerate() {
        let ranks: Vec<usize> = (first..(first + rpn).min(p)).collect();
        let mut dev = NicCxi::new(NicId(n as u32), nic.clone());
        'gens: for g in 0..max_instances as u64 {
            for &r in &ranks {
                let ops: Vec<OpSpec> = (0..rounds)
                    .map(|round| OpSpec {
                        threshold: round + 1,
                        src: dummy,
                        len: 8,
                        inline: None,
                        dst: dummy,
                        peer: barrier_round_targets(p, r, round).0,
                        flag: None,
                        tag: WriteTag::BarrierSignal { gen: g, round },
                    })
                    .collect();
                let counter = dev.alloc_counter(r);
                match arm_generation(&mut dev, counter, r, EntryClass::Barrier, &ops) {
                    Ok(_) => armed[r] += 1,
                    Err(e) => {
                        first_error.get_or_insert_with(|| e.to_string());
                        break 'gens;
                    }
                }
            }
        }
        dwq_hwm = dwq_hwm.max(dev.stats.dwq_hwm);
        inc_hwm = inc_hwm.max(dev.stats.increments_hwm);
    }
    Ok(ExhaustionResult {
        ranks: p,
        rounds,
        armed: armed.iter().copied().min().unwrap_or(0),
        first_error,
        dwq_hwm,
        increments_hwm: inc_hwm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JacobiRow {
    pub ranks: usize,
    pub gpu_time: SimTime,
    pub host_time: SimTime,
    pub gpu_efficiency: f64,
    pub host_efficiency: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JacobiParams {
    pub iters: u64,
    pub compute_per_iter: SimTime,
    pub halo_bytes: u32,
}

/// Host-driven iteration: kernel, then host-run halo exchange and barrier.
fn jacobi_host_time(p: usize, j: &JacobiParams, costs: &CostModel, cfg: &SimConfig) -> SimTime {
    let bpn = cfg.fabric.bytes_per_ns;
    let xfer = if bpn == 0 {
        0
    } else {
        (j.halo_bytes as u64).div_ceil(bpn)
    };
    let comm = if p > 1 {
        2 * costs.host_coord_cost.nanos() + xfer
    } else {
        0
    };
    SimTime(j.iters * (costs.kernel_launch_cost.nanos() + j.compute_per_iter.nanos() + comm))
}

pub fn jacobi_weak_scaling(
    ps: &[usize],
    j: &JacobiParams,
    costs: &CostModel,
    base: &SimConfig,
) -> Result<Vec<JacobiRow>, SimError> {
    let program = vec![DeviceStep::Repeat {
        count: j.iters,
        body: vec![
            DeviceStep::Compute(j.compute_per_iter),
            DeviceStep::Halo,
            DeviceStep::BarrierAll,
        ]
        .into(),
    }];
    let mut times = Vec::new();
    for &p in ps {
        let mut cfg = base.clone();
        cfg.ranks = p;
        cfg.halo_bytes = j.halo_bytes;
        costs.configure(&mut cfg);
        let out = run_uniform(cfg.clone(), program.clone())?;
        expect_completed(&out)?;
        times.push((p, out.end_time, jacobi_host_time(p, j, costs, &cfg)));
    }
    let mut cfg1 = base.clone();
    costs.configure(&mut cfg1);
    cfg1.ranks = 1;
    cfg1.halo_bytes = j.halo_bytes;
    let t1_gpu = run_uniform(cfg1.clone(), program)?.end_time;
    let t1_host = jacobi_host_time(1, j, costs, &cfg1);
    Ok(times
        .into_iter()
        .map(|(p, g, h)| JacobiRow {
            ranks: p,
            gpu_time: g,
            host_time: h,
            gpu_efficiency: t1_gpu.nanos() as f64 / g.nanos() as f64,
            host_efficiency: t1_host.nanos() as f64 / h.nanos() as f64,
        })
        .collect())
}

/// Per-rank programs of `barriers` barriers, each preceded by a random compute in `[0, max_skew]`.
pub fn skewed_barrier_programs(
    p: usize,
    barriers: u64,
    max_skew: SimTime,
    seed: u64,
) -> Vec<Vec<DeviceStep>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..p)
        .map(|_| {
            let mut v = Vec::with_capacity(2 * barriers as usize);
            for _ in 0..barriers {
                v.push(DeviceStep::Compute(SimTime(
                    rng.gen_range(0..=max_skew.nanos()),
                )));
                v.push(DeviceStep::BarrierAll);
            }
            v
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SafetyResult {
    pub status: String,
    pub online: u64,
    pub trace: usize,
    pub handoff: usize,
}

pub fn barrier_safety_run(
    cfg: &SimConfig,
    barriers: u64,
    max_skew: SimTime,
    seed: u64,
) -> Result<SafetyResult, SimError> {
    let mut cfg = cfg.clone();
    cfg.trace = TraceLevel::Coordination;
    let spec = WorldSpec {
        programs: skewed_barrier_programs(cfg.ranks, barriers, max_skew, seed)
            .into_iter()
            .map(Into::into)
            .collect(),
        ..Default::default()
    };
    let p = cfg.ranks;
    let out = Simulation::new(cfg, spec)?.run();
    Ok(SafetyResult {
        status: out.status.label(),
        online: out.metrics.violations.barrier_safety,
        trace: barrier_safety_violations(out.trace.records(), p).len(),
        handoff: handoff_violations(out.trace.records()).len(),
    })
}

/// Randomized active-message traffic: rounds of bounded bursts, each followed by
/// a drain of exactly the messages addressed to the rank in that round.
pub fn am_stress_spec(
    p: usize,
    messages: u64,
    burst: u64,
    handlers: u32,
    max_args: usize,
    seed: u64,
) -> WorldSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut programs: Vec<Vec<DeviceStep>> = vec![Vec::new(); p];
    let mut sent = 0u64;
    while sent < messages {
        let mut incoming = vec![0u64; p];
        for (r, prog) in programs.iter_mut().enumerate() {
            let n = rng.gen_range(0..=burst).min(messages - sent);
            for _ in 0..n {
                let peer = rng.gen_range(0..p);
                let len = rng.gen_range(0..=max_args);
                let args: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
                prog.push(DeviceStep::AmSend {
                    peer: PeerSpec::Abs(peer),
                    handler: rng.gen_range(1..=handlers),
                    args,
                });
                incoming[peer] += 1;
                if rng.gen_bool(0.1) {
                    prog.push(DeviceStep::Compute(SimTime(rng.gen_range(0..2_000))));
                }
            }
            let _ = r;
            sent += n;
        }
        for (r, prog) in programs.iter_mut().enumerate() {
            if incoming[r] > 0 {
                prog.push(DeviceStep::AmDrain { count: incoming[r] });
            }
        }
    }
    let mut spec = WorldSpec {
        programs: programs.into_iter().map(Into::into).collect(),
        ..Default::default()
    };
    for h in 1..=handlers {
        let body = if h % 2 == 0 {
            vec![DeviceStep::Compute(SimTime(100 * h as u64))]
        } else {
            Vec::new()
        };
        spec.handlers.insert(h, body.into());
    }
    spec
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nic_cxi::max_prestaged_barriers;

    #[test]
    fn phase_program_preserves_total_compute() {
        for n in [1, 3, 7, 200, 1000] {
            let prog = phase_program(SimTime(10_600_001), n);
            let mut total = 0;
            let mut barriers = 0;
            for s in &prog {
                s.walk(&mut |s| {
                    if let DeviceStep::Repeat { count, body } = s {
                        for b in body.iter() {
                            match b {
                                DeviceStep::Compute(d) => total += count * d.nanos(),
                                DeviceStep::BarrierAll => barriers += count,
                                _ => {}
                            }
                        }
                    }
                });
            }
            assert_eq!((total, barriers), (10_600_001, n));
        }
    }

    #[test]
    fn host_driven_fraction_at_200_phases() {
        let c = CostModel::calibrated();
        let r = phase_benchmark(200, PhaseMode::HostDriven, &c, 2, &SimConfig::default()).unwrap();
        assert_eq!(r.end_time, SimTime(10_600_000 + 200 * 25_200));
        let f = r.coordination_fraction();
        assert!((f - 5_040.0 / 15_640.0).abs() < 1e-12);
    }

    #[test]
    fn gpu_barrier_costs_the_calibrated_trigger() {
        let c = CostModel::calibrated();
        let r = phase_benchmark(10, PhaseMode::GpuTriggered, &c, 2, &SimConfig::default()).unwrap();
        assert_eq!(r.per_coordination_ns, 110.0);
        assert_eq!(r.end_time, SimTime(10_600_000 + 10 * 110));
    }

    #[test]
    fn exhaustion_matches_formula_for_small_rank_counts() {
        let nic = NicParams::default();
        for p in [2, 3, 8, 64] {
            let r = exhaustion_study(p, &nic, 1, 10_000).unwrap();
            assert_eq!(
                r.armed,
                max_prestaged_barriers(p, 256, 2047).unwrap(),
                "P={p}"
            );
            assert!(r.first_error.is_some());
        }
    }

    #[test]
    fn shared_nic_divides_the_budget() {
        let nic = NicParams::default();
        let r = exhaustion_study(64, &nic, 4, 10_000).unwrap();
        assert_eq!(
            r.armed,
            crate::nic_cxi::max_prestaged_barriers_shared(64, 256, 2047, 4).unwrap()
        );
    }

    #[test]
    fn am_stress_programs_are_balanced() {
        let spec = am_stress_spec(4, 500, 8, 3, 16, 9);
        let mut sends = 0;
        let mut drains = 0;
        for prog in &spec.programs {
            for s in prog.iter() {
                match s {
                    DeviceStep::AmSend { .. } => sends += 1,
                    DeviceStep::AmDrain { count } => drains += count,
                    _ => {}
                }
            }
        }
        assert_eq!((sends, drains), (500, 500));
    }
}
