//! Trace-driven multi-core DRAM simulation.
//!
//! Time is kept in picoseconds. Cores run at a fixed period and retire up to
//! `issue_width` instructions per cycle from a bounded window; a read holds
//! its window slot until its data burst ends, a write retires as soon as it
//! enters the write queue. Each channel has its own FR-FCFS controller that
//! ticks at the DRAM clock of the current operating point. Every
//! `interval_cycles` the policy hook sees the interval's workload profile and
//! bandwidth utilization and may request a new operating point.

pub mod addr;
pub mod audit;
pub mod config;
pub mod controller;
mod core;
pub mod trace;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::power::{account, CommandCounts, EnergyReport, PowerConfig, RunUsage, Segment};
use crate::timing::{LatencyTable, VoltageOperatingPoint};
use crate::voltron::{slow_bank_count, DecisionRecord, Policy, PredictorCoefficients, WorkloadProfile};

pub use self::audit::{audit, Violation};
pub use self::config::{DeviceTimings, SimConfig};
pub use self::controller::{Command, Controller, Issued, MemRequest, OpSegment, OpState, QueueConfig};
use self::core::Core;
pub use self::trace::{builtin_trace, format_trace, parse_trace, Synthetic, Trace, TraceRecord};

/// Policy plus everything it needs to choose operating points.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySetup {
    pub policy: Policy,
    pub table: LatencyTable,
    pub coeffs: PredictorCoefficients,
    pub initial: VoltageOperatingPoint,
}

impl PolicySetup {
    pub fn fixed(op: VoltageOperatingPoint) -> Self {
        Self {
            policy: Policy::Fixed,
            table: LatencyTable::published(),
            coeffs: PredictorCoefficients::default(),
            initial: op,
        }
    }

    pub fn new(policy: Policy, table: LatencyTable) -> Self {
        let initial = *table.nominal();
        Self { policy, table, coeffs: PredictorCoefficients::default(), initial }
    }

    fn slow_banks(&self, v_array: f64, banks: u32) -> u32 {
        match self.policy {
            Policy::VoltronBl { .. } => slow_bank_count(v_array).min(banks),
            _ => banks,
        }
    }
}

/// One line of the command log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub time_ps: u64,
    /// DRAM clock index on the channel.
    pub cycle: u64,
    pub channel: u32,
    pub bank: u32,
    pub cmd: Command,
    pub row: u32,
}

pub const COMMAND_LOG_HEADER: &str = "cycle,channel,bank,cmd,row";

/// `cycle,channel,bank,cmd,row`; REF rows carry bank and row 0.
pub fn command_log_csv(log: &[CommandRecord]) -> String {
    let mut out = String::with_capacity(log.len() * 24 + 32);
    out.push_str(COMMAND_LOG_HEADER);
    out.push('\n');
    for c in log {
        out.push_str(&format!("{},{},{},{},{}\n", c.cycle, c.channel, c.bank, c.cmd.as_str(), c.row));
    }
    out
}

/// Parses the command log into `(cycle, channel, bank, cmd, row)`.
pub fn parse_command_log(text: &str) -> Result<Vec<(u64, u32, u32, Command, u32)>> {
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, h)| h) != Some(COMMAND_LOG_HEADER) {
        return Err(Error::CsvParse { line: 1, message: "bad header".into() });
    }
    lines
        .map(|(i, line)| {
            let err = |m: &str| Error::CsvParse { line: i + 1, message: m.into() };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(err("expected 5 fields"));
            }
            Ok((
                f[0].parse().map_err(|_| err("bad cycle"))?,
                f[1].parse().map_err(|_| err("bad channel"))?,
                f[2].parse().map_err(|_| err("bad bank"))?,
                Command::parse(f[3]).ok_or_else(|| err("bad command"))?,
                f[4].parse().map_err(|_| err("bad row"))?,
            ))
        })
        .collect()
}

/// Timing of one completed read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadRecord {
    pub core: u32,
    pub addr: u64,
    pub channel: u32,
    pub arrival_ps: u64,
    pub completion_ps: u64,
    /// DRAM clock period when the read was served.
    pub t_ck_ps: u64,
}

impl ReadRecord {
    pub fn latency_cycles(&self) -> f64 {
        (self.completion_ps - self.arrival_ps) as f64 / self.t_ck_ps as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CoreStats {
    pub instructions: u64,
    /// CPU cycles until the core retired its last instruction.
    pub cycles: u64,
    pub ipc: f64,
    pub reads: u64,
    pub writes: u64,
    /// Read misses per kilo-instruction.
    pub mpki: f64,
    pub stall_cycles: u64,
    pub stall_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimStats {
    pub total_cycles: u64,
    pub runtime_ps: u64,
    pub cores: Vec<CoreStats>,
    /// Fraction of the run each channel's data bus was busy.
    pub channel_utilization: Vec<f64>,
    pub commands: CommandCounts,
    pub reads_issued: u64,
    pub reads_completed: u64,
    pub avg_read_latency_ns: f64,
    pub late_refreshes: u64,
    pub intervals: u64,
    pub weighted_speedup: Option<f64>,
}

impl SimStats {
    pub fn ipcs(&self) -> Vec<f64> {
        self.cores.iter().map(|c| c.ipc).collect()
    }

    pub fn instructions(&self) -> u64 {
        self.cores.iter().map(|c| c.instructions).sum()
    }

    /// Fills in weighted speedup against per-core IPCs of alone runs.
    pub fn with_reference(mut self, ipc_alone: &[f64]) -> Result<Self> {
        self.weighted_speedup = Some(weighted_speedup(ipc_alone, &self.ipcs())?);
        Ok(self)
    }
}

/// `sum(shared_i / alone_i)`.
pub fn weighted_speedup(ipc_alone: &[f64], ipc_shared: &[f64]) -> Result<f64> {
    if ipc_alone.len() != ipc_shared.len() {
        return Err(Error::InvalidReference("IPC vectors differ in length".into()));
    }
    if let Some(i) = ipc_alone.iter().position(|&a| !(a > 0.0)) {
        return Err(Error::InvalidReference(format!("alone IPC of core {i} is not positive")));
    }
    Ok(ipc_alone.iter().zip(ipc_shared).map(|(a, s)| s / a).sum())
}

/// Per-core counters over one control interval.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IntervalCounters {
    pub instructions: u64,
    pub read_misses: u64,
    pub stall_cycles: u64,
    /// The core still had work at some point in the interval.
    pub active: bool,
}

/// MPKI over all active cores' instructions, and the mean stall fraction
/// of the active cores.
pub fn collect_profile(counters: &[IntervalCounters], interval_cycles: u64) -> WorkloadProfile {
    let active: Vec<&IntervalCounters> = counters.iter().filter(|c| c.active).collect();
    if active.is_empty() || interval_cycles == 0 {
        return WorkloadProfile::default();
    }
    let insts: u64 = active.iter().map(|c| c.instructions).sum();
    let misses: u64 = active.iter().map(|c| c.read_misses).sum();
    let mpki = if insts == 0 { 0.0 } else { 1000.0 * misses as f64 / insts as f64 };
    let stall =
        active.iter().map(|c| c.stall_cycles as f64 / interval_cycles as f64).sum::<f64>() / active.len() as f64;
    WorkloadProfile { mpki, stall_fraction: stall.clamp(0.0, 1.0) }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub stats: SimStats,
    pub energy: EnergyReport,
    pub decisions: Vec<DecisionRecord>,
    /// Per channel.
    pub history: Vec<Vec<OpSegment>>,
    /// Empty unless `record_commands` is set.
    pub commands: Vec<CommandRecord>,
    pub reads: Vec<ReadRecord>,
}

impl SimOutput {
    /// The operating-point history in the form the energy accounting uses.
    pub fn segments(&self) -> Vec<Vec<Segment>> {
        self.history.iter().map(|h| to_segments(h)).collect()
    }
}

fn to_segments(h: &[OpSegment]) -> Vec<Segment> {
    h.iter()
        .map(|s| Segment {
            start_ps: s.start_ps,
            end_ps: s.end_ps,
            v_array: s.op.v_array,
            v_peripheral: s.op.v_peripheral,
            channel_rate: s.op.channel_rate,
            counts: s.counts,
        })
        .collect()
}

/// Runs `traces` (one per core) to completion.
pub fn run_simulation(
    cfg: &SimConfig,
    traces: &[Trace],
    setup: &PolicySetup,
    power: &PowerConfig,
) -> Result<SimOutput> {
    cfg.validate()?;
    setup.policy.validate()?;
    setup.initial.validate()?;
    if traces.is_empty() || traces.len() > 4 {
        return Err(Error::InvalidConfig("one to four traces are required".into()));
    }
    let mapper = cfg.mapper();
    let mut cores = traces
        .iter()
        .enumerate()
        .map(|(i, t)| Core::new(i as u32, t, &mapper, cfg.window, cfg.issue_width))
        .collect::<Result<Vec<_>>>()?;
    let slow = setup.slow_banks(setup.initial.v_array, cfg.banks);
    let mut ctrls: Vec<Controller> = (0..cfg.channels)
        .map(|ch| Controller::new(ch, cfg.banks, cfg.device, cfg.queues(), setup.initial, slow))
        .collect();

    let period = cfg.cpu_period_ps;
    let mut decisions = Vec::new();
    let mut commands = Vec::new();
    let mut reads = Vec::new();
    let mut latency_sum_ps = 0u128;
    let mut reads_completed = 0u64;
    let mut bus_at_interval: Vec<u64> = vec![0; ctrls.len()];
    let mut intervals = 0u64;

    let mut cycle = 0u64;
    loop {
        let t = cycle * period;
        let all_done = cores.iter().all(|c| c.finished()) && ctrls.iter().all(|c| c.idle());
        if all_done {
            break;
        }
        if cycle >= cfg.max_cycles {
            return Err(Error::InvalidConfig(format!("run exceeded max_cycles = {}", cfg.max_cycles)));
        }

        if cycle > 0 && cycle % cfg.interval_cycles == 0 {
            intervals += 1;
            let counters: Vec<IntervalCounters> = cores.iter_mut().map(|c| c.take_interval()).collect();
            let profile = collect_profile(&counters, cfg.interval_cycles);
            let interval_ps = cfg.interval_cycles * period;
            let util = ctrls
                .iter()
                .zip(&mut bus_at_interval)
                .map(|(c, prev)| {
                    let busy = c.bus_busy_ps() - *prev;
                    *prev = c.bus_busy_ps();
                    busy as f64 / interval_ps as f64
                })
                .sum::<f64>()
                / ctrls.len() as f64;
            if let Some(mut d) = setup.policy.decide(&profile, util, &setup.table, &setup.coeffs) {
                d.cycle = cycle;
                let slow = if matches!(setup.policy, Policy::VoltronBl { .. }) { d.slow_banks } else { cfg.banks };
                for c in &mut ctrls {
                    c.request_op(d.op_point, slow);
                }
                decisions.push(DecisionRecord::new(&setup.policy, &d));
            }
        }

        for core in &mut cores {
            core.retire(t, cycle);
        }
        for core in &mut cores {
            core.fetch(&mut ctrls);
        }

        let t_end = t + period;
        for ctrl in &mut ctrls {
            ctrl.skip_idle(t_end);
            while ctrl.next_tick() < t_end {
                let Some(i) = ctrl.tick() else {
                    ctrl.skip_idle(t_end);
                    continue;
                };
                if cfg.record_commands {
                    commands.push(CommandRecord {
                        time_ps: i.time_ps,
                        cycle: i.tick,
                        channel: i.channel,
                        bank: i.bank,
                        cmd: i.cmd,
                        row: i.row,
                    });
                }
                if let Some((req, done)) = i.served {
                    cores[req.core as usize].complete(req.seq, done);
                    reads_completed += 1;
                    latency_sum_ps += (done - req.arrival_ps) as u128;
                    if cfg.record_commands {
                        reads.push(ReadRecord {
                            core: req.core,
                            addr: req.addr,
                            channel: i.channel,
                            arrival_ps: req.arrival_ps,
                            completion_ps: done,
                            t_ck_ps: ctrl.op_state().tck,
                        });
                    }
                }
            }
        }
        cycle += 1;
    }

    let runtime_ps = cycle * period;
    let history: Vec<Vec<OpSegment>> = ctrls.iter_mut().map(|c| c.finish(runtime_ps)).collect();
    let mut counts = CommandCounts::default();
    for seg in history.iter().flatten() {
        counts.add(&seg.counts);
    }
    let core_stats: Vec<CoreStats> = cores.iter().map(|c| c.stats()).collect();
    let reads_issued = core_stats.iter().map(|c| c.reads).sum();
    let stats = SimStats {
        total_cycles: cycle,
        runtime_ps,
        channel_utilization: ctrls
            .iter()
            .map(|c| if runtime_ps == 0 { 0.0 } else { c.bus_busy_ps() as f64 / runtime_ps as f64 })
            .collect(),
        commands: counts,
        reads_issued,
        reads_completed,
        avg_read_latency_ns: if reads_completed == 0 {
            0.0
        } else {
            latency_sum_ps as f64 / reads_completed as f64 / 1000.0
        },
        late_refreshes: ctrls.iter().map(|c| c.late_refreshes()).sum(),
        intervals,
        weighted_speedup: None,
        cores: core_stats,
    };
    let usage = RunUsage {
        runtime_ps,
        core_active_ps: stats.cores.iter().map(|c| c.cycles * period).collect(),
        instructions: stats.instructions(),
    };
    let segments: Vec<Vec<Segment>> = history.iter().map(|h| to_segments(h)).collect();
    let energy = account(&usage, &segments, power)?;
    Ok(SimOutput { stats, energy, decisions, history, commands, reads })
}
