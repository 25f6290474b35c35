use voltsim::memsim::*;
use voltsim::power::PowerConfig;
use voltsim::timing::{LatencyTable, VoltageOperatingPoint};
use voltsim::voltron::Policy;
use voltsim::Error;

fn small_cfg() -> SimConfig {
    SimConfig { record_commands: true, interval_cycles: 100_000, ..SimConfig::default() }
}

fn builtin(name: &str, records: usize, cores: u32, seed: u64, cfg: &SimConfig) -> Vec<Trace> {
    let cap = cfg.mapper().capacity_bytes();
    (0..cores).map(|c| builtin_trace(&format!("builtin:{name}:{records}"), c, seed, cap).unwrap().unwrap()).collect()
}

fn run(cfg: &SimConfig, traces: &[Trace], setup: &PolicySetup) -> SimOutput {
    run_simulation(cfg, traces, setup, &PowerConfig::default()).unwrap()
}

#[test]
fn empty_traces_simulate_nothing() {
    let cfg = small_cfg();
    let out = run(&cfg, &[vec![], vec![]], &PolicySetup::fixed(VoltageOperatingPoint::nominal()));
    assert_eq!(out.stats.total_cycles, 0);
    assert_eq!(out.stats.commands.total(), 0);
    assert!(out.commands.is_empty());
    assert_eq!(out.energy.dram_dynamic_j(), 0.0);
}

#[test]
fn trace_count_is_checked() {
    let cfg = small_cfg();
    let setup = PolicySetup::fixed(VoltageOperatingPoint::nominal());
    assert!(matches!(run_simulation(&cfg, &[], &setup, &PowerConfig::default()), Err(Error::InvalidConfig(_))));
    let five = vec![vec![]; 5];
    assert!(run_simulation(&cfg, &five, &setup, &PowerConfig::default()).is_err());
}

#[test]
fn out_of_range_address_is_a_decode_error() {
    let cfg = small_cfg();
    let t = vec![TraceRecord { bubble: 0, addr: cfg.mapper().capacity_bytes(), write: false }];
    let r = run_simulation(&cfg, &[t], &PolicySetup::fixed(VoltageOperatingPoint::nominal()), &PowerConfig::default());
    assert!(matches!(r, Err(Error::AddressDecode(_))));
}

/// A read to a closed row, then (once it has retired) a read to the same row.
fn miss_then_hit() -> Trace {
    vec![
        TraceRecord { bubble: 0, addr: 0x4_0000, write: false },
        TraceRecord { bubble: 1000, addr: 0x4_0000, write: false },
    ]
}

#[test]
fn isolated_read_latencies_are_closed_form() {
    let cfg = small_cfg();
    for op in LatencyTable::published().rows() {
        let out = run(&cfg, &[miss_then_hit()], &PolicySetup::fixed(*op));
        let t = &op.timings;
        assert_eq!(out.reads.len(), 2);
        assert_eq!(out.reads[0].latency_cycles(), (t.rcd + t.cl + 4) as f64, "miss at {}", op.v_array);
        assert_eq!(out.reads[1].latency_cycles(), (t.cl + 4) as f64, "hit at {}", op.v_array);
    }
}

#[test]
fn deterministic_and_conserving() {
    let cfg = small_cfg();
    let traces = builtin("random", 3000, 4, 7, &cfg);
    let setup = PolicySetup::new(Policy::Voltron { target_loss: 5.0 }, LatencyTable::published());
    let a = run(&cfg, &traces, &setup);
    let b = run(&cfg, &traces, &setup);
    assert_eq!(a, b);
    assert_eq!(a.stats.reads_issued, a.stats.reads_completed);
    assert_eq!(a.stats.instructions(), traces.iter().flatten().map(|r| r.instructions()).sum::<u64>());
    assert!(a.stats.channel_utilization.iter().all(|u| (0.0..=1.0).contains(u)));
    let ws = a.stats.clone().with_reference(&a.stats.ipcs()).unwrap().weighted_speedup.unwrap();
    assert!((ws - 4.0).abs() < 1e-12);
    for c in &a.stats.cores {
        assert!(c.stall_cycles <= c.cycles);
    }
}

#[test]
fn command_logs_pass_the_audit_under_every_policy() {
    let cfg = small_cfg();
    let traces = builtin("random", 4000, 4, 3, &cfg);
    let table = LatencyTable::published();
    let policies = [
        Policy::Fixed,
        Policy::Voltron { target_loss: 10.0 },
        Policy::VoltronBl { target_loss: 10.0 },
        Policy::Memdvfs { hi: 0.4, lo: 0.15 },
    ];
    for p in policies {
        let out = run(&cfg, &traces, &PolicySetup::new(p, table.clone()));
        assert_eq!(out.decisions.is_empty(), p == Policy::Fixed, "{}", p.name());
        let v = audit(&out.commands, &out.history, cfg.banks, &cfg.device, out.stats.runtime_ps);
        assert!(v.is_empty(), "{}: {:?}", p.name(), &v[..v.len().min(5)]);
        assert_eq!(out.stats.late_refreshes, 0);
    }
}

#[test]
fn audit_catches_a_shortened_gap() {
    let cfg = small_cfg();
    let out = run(&cfg, &[miss_then_hit()], &PolicySetup::fixed(VoltageOperatingPoint::nominal()));
    let mut log = out.commands.clone();
    let rd = log.iter().position(|c| c.cmd == Command::Rd).unwrap();
    log[rd].time_ps -= 1250;
    let v = audit(&log, &out.history, cfg.banks, &cfg.device, out.stats.runtime_ps);
    assert!(v.iter().any(|x| x.rule == "tRCD"), "{v:?}");
}

#[test]
fn refresh_is_issued_every_interval() {
    let cfg = small_cfg();
    let out = run(&cfg, &builtin("stream", 6000, 2, 1, &cfg), &PolicySetup::fixed(VoltageOperatingPoint::nominal()));
    for ch in 0..cfg.channels {
        let refs: Vec<u64> =
            out.commands.iter().filter(|c| c.channel == ch && c.cmd == Command::Ref).map(|c| c.time_ps).collect();
        assert!(!refs.is_empty());
        for (k, t) in refs.iter().enumerate() {
            assert_eq!(*t, (k as u64 + 1) * 7_800_000);
        }
    }
}

#[test]
fn slower_timings_never_finish_sooner() {
    let cfg = small_cfg();
    let table = LatencyTable::published();
    for (name, cores) in [("random", 1), ("mixed", 1), ("random", 2)] {
        let traces = builtin(name, 1500, cores, 11, &cfg);
        let cycles: Vec<u64> =
            table.rows().iter().map(|op| run(&cfg, &traces, &PolicySetup::fixed(*op)).stats.total_cycles).collect();
        // Rows go from nominal to the slowest timings.
        for w in cycles.windows(2) {
            assert!(w[1] >= w[0], "{name}/{cores}: {cycles:?}");
        }
    }
}

#[test]
fn command_log_csv_round_trips() {
    let cfg = small_cfg();
    let out = run(&cfg, &builtin("mixed", 500, 2, 5, &cfg), &PolicySetup::fixed(VoltageOperatingPoint::nominal()));
    let parsed = parse_command_log(&command_log_csv(&out.commands)).unwrap();
    assert_eq!(parsed.len(), out.commands.len());
    for (p, c) in parsed.iter().zip(&out.commands) {
        assert_eq!(*p, (c.cycle, c.channel, c.bank, c.cmd, c.row));
    }
}

#[test]
fn history_covers_the_run_and_matches_command_counts() {
    let cfg = small_cfg();
    let traces = builtin("random", 3000, 4, 2, &cfg);
    let out = run(&cfg, &traces, &PolicySetup::new(Policy::Memdvfs { hi: 0.9, lo: 0.8 }, LatencyTable::published()));
    for (ch, h) in out.history.iter().enumerate() {
        assert_eq!(h.first().unwrap().start_ps, 0);
        assert_eq!(h.last().unwrap().end_ps, out.stats.runtime_ps);
        let n: u64 = h.iter().map(|s| s.counts.total()).sum();
        assert_eq!(n, out.commands.iter().filter(|c| c.channel == ch as u32).count() as u64);
    }
    assert!(out.history[0].len() > 1, "the policy should have moved the channel off nominal");
}
