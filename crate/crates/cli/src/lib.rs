//! Command implementations behind the `voltsim` binary.
//!
//! Every command reads a [`RunConfig`], writes its reports into the output
//! directory and returns the paths it wrote.

pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use voltsim::circuit::simulate_bitline;
use voltsim::errmodel::{
    anova_oneway, ber_csv, find_min_latencies_experimental, find_vmin, parse_ber_csv, spatial_heatmap, voltage_test,
    BerRow, DataPatternPair, DimmProfile, ErrorReport, VminScan, RELIABLE_LATENCY_NS,
};
use voltsim::memsim::{
    builtin_trace, command_log_csv, parse_trace, run_simulation, PolicySetup, SimOutput, SimStats, Trace,
};
use voltsim::timing::LatencyTable;
use voltsim::voltron::{decision_log_csv, fit_predictor, LossSample, Policy};
use voltsim::Error;

pub use config::RunConfig;

/// A failed command, split by exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Bad arguments or configuration (exit 2).
    Usage(String),
    /// Anything that went wrong while running (exit 1).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_)
            | Error::InvalidParameter(_)
            | Error::InvalidProfile(_)
            | Error::NoSuchOperatingPoint(_)
            | Error::UnsupportedRate(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Resolved settings shared by every command.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: RunConfig,
    pub seed: u64,
    pub jobs: usize,
    pub out_dir: PathBuf,
}

impl Context {
    pub fn new(cfg: RunConfig, seed: u64, jobs: Option<usize>, out_dir: Option<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let jobs = jobs.or(cfg.jobs).unwrap_or(1);
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be positive".into()));
        }
        let out_dir = out_dir.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("voltsim-out"));
        Ok(Self { cfg, seed, jobs, out_dir })
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)
                .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        }
        std::fs::write(&path, contents)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| CliError::Runtime(format!("cannot start worker threads: {e}")))
    }

    /// One trace per configured entry, built-in traces seeded per core.
    pub fn traces(&self) -> Result<Vec<Trace>> {
        if self.cfg.traces.is_empty() {
            return Err(CliError::Usage("no traces given (use --trace or `traces` in the config)".into()));
        }
        let cap = self.cfg.system.mapper().capacity_bytes();
        self.cfg
            .traces
            .iter()
            .enumerate()
            .map(|(core, spec)| match builtin_trace(spec, core as u32, self.seed, cap)? {
                Some(t) => Ok(t),
                None => {
                    let text = config::read(Path::new(spec))?;
                    parse_trace(&text).map_err(|e| CliError::Runtime(format!("{spec}: {e}")))
                }
            })
            .collect()
    }
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("reports serialize");
    s.push('\n');
    s
}

pub fn cmd_latency_table(ctx: &Context) -> Result<Vec<PathBuf>> {
    let table = ctx.cfg.latency_table()?;
    Ok(vec![ctx.write("latency_table.csv", &table.to_csv())?])
}

pub fn cmd_bitline(ctx: &Context) -> Result<Vec<PathBuf>> {
    let b = &ctx.cfg.bitline;
    let params = ctx.cfg.circuit_params()?;
    let traj = simulate_bitline(&params, b.vdd, b.cell_stores_one, b.t_pre_issue_ns, b.dt_ns)?;
    Ok(vec![ctx.write("bitline.csv", &traj.to_csv())?])
}

fn policy_setup(ctx: &Context, policy: Policy, table: &LatencyTable) -> Result<PolicySetup> {
    let initial = match policy {
        Policy::Fixed => *table.lookup(ctx.cfg.policy.voltage)?,
        _ => *table.nominal(),
    };
    Ok(PolicySetup { policy, table: table.clone(), coeffs: ctx.cfg.coefficients()?, initial })
}

fn simulate(ctx: &Context, traces: &[Trace], setup: &PolicySetup) -> Result<SimOutput> {
    Ok(run_simulation(&ctx.cfg.system, traces, setup, &ctx.cfg.power)?)
}

/// Per-trace IPC when each trace runs alone at the nominal point.
fn alone_ipcs(ctx: &Context, traces: &[Trace], table: &LatencyTable) -> Result<Vec<f64>> {
    let mut sys = ctx.cfg.system.clone();
    sys.record_commands = false;
    let setup = PolicySetup::fixed(*table.nominal());
    ctx.pool()?.install(|| {
        traces
            .par_iter()
            .map(|t| {
                let out = run_simulation(&sys, std::slice::from_ref(t), &setup, &ctx.cfg.power)?;
                Ok(out.stats.cores[0].ipc)
            })
            .collect()
    })
}

#[derive(Serialize)]
struct StatsReport<'a> {
    policy: &'a str,
    seed: u64,
    #[serde(flatten)]
    stats: &'a SimStats,
}

pub fn cmd_simulate(ctx: &Context) -> Result<Vec<PathBuf>> {
    let table = ctx.cfg.latency_table()?;
    let policy = ctx.cfg.policy()?;
    let setup = policy_setup(ctx, policy, &table)?;
    let traces = ctx.traces()?;
    let out = simulate(ctx, &traces, &setup)?;
    let mut stats = out.stats.clone();
    if ctx.cfg.policy.weighted_speedup {
        stats = stats.with_reference(&alone_ipcs(ctx, &traces, &table)?)?;
    }
    let mut paths = vec![
        ctx.write("stats.json", &json(&StatsReport { policy: policy.name(), seed: ctx.seed, stats: &stats }))?,
        ctx.write("energy.json", &json(&out.energy))?,
        ctx.write("energy.csv", &out.energy.to_csv())?,
        ctx.write("decisions.csv", &decision_log_csv(&out.decisions))?,
    ];
    if ctx.cfg.system.record_commands {
        paths.push(ctx.write("commands.csv", &command_log_csv(&out.commands))?);
    }
    Ok(paths)
}

/// One sweep row, relative to the nominal baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub ws_loss_pct: f64,
    pub dram_power_savings_pct: f64,
    pub system_energy_savings_pct: f64,
}

impl SweepRow {
    pub fn relative(base: &SimOutput, run: &SimOutput, alone: &[f64]) -> Result<Self> {
        let ws = |o: &SimOutput| voltsim::memsim::weighted_speedup(alone, &o.stats.ipcs());
        let pct = |x: f64, b: f64| if b == 0.0 { 0.0 } else { 100.0 * (1.0 - x / b) };
        Ok(Self {
            ws_loss_pct: pct(ws(run)?, ws(base)?),
            dram_power_savings_pct: pct(run.energy.dram_power_w(), base.energy.dram_power_w()),
            system_energy_savings_pct: pct(run.energy.total_j, base.energy.total_j),
        })
    }

    fn csv_fields(&self) -> String {
        format!("{:.4},{:.4},{:.4}", self.ws_loss_pct, self.dram_power_savings_pct, self.system_energy_savings_pct)
    }
}

pub const SWEEP_HEADER: &str = "v_array,ws_loss_pct,dram_power_savings_pct,system_energy_savings_pct";
pub const POLICY_SWEEP_HEADER: &str = "policy,ws_loss_pct,dram_power_savings_pct,system_energy_savings_pct";

/// Parses `sweep.csv` back into `(v_array, row)` pairs.
pub fn parse_sweep_csv(text: &str) -> Result<Vec<(f64, SweepRow)>> {
    let mut lines = text.lines();
    if lines.next() != Some(SWEEP_HEADER) {
        return Err(CliError::Runtime("bad sweep header".into()));
    }
    lines
        .map(|l| {
            let f: Vec<f64> = l
                .split(',')
                .map(|x| x.parse::<f64>().map_err(|_| CliError::Runtime(format!("bad sweep line '{l}'"))))
                .collect::<Result<_>>()?;
            if f.len() != 4 {
                return Err(CliError::Runtime(format!("bad sweep line '{l}'")));
            }
            Ok((f[0], SweepRow { ws_loss_pct: f[1], dram_power_savings_pct: f[2], system_energy_savings_pct: f[3] }))
        })
        .collect()
}

/// Runs the nominal baseline, the alone references and one member per
/// voltage (or policy) and reports each member relative to the baseline.
pub fn cmd_sweep(ctx: &Context) -> Result<Vec<PathBuf>> {
    let table = ctx.cfg.latency_table()?;
    let traces = ctx.traces()?;
    let sw = &ctx.cfg.sweep;
    let mut sys = ctx.cfg.system.clone();
    sys.record_commands = false;

    let by_policy = !sw.policies.is_empty();
    let mut members: Vec<(String, PolicySetup)> = Vec::new();
    if by_policy {
        for name in &sw.policies {
            let mut pc = ctx.cfg.clone();
            pc.policy.name = name.clone();
            let p = pc.policy()?;
            members.push((name.clone(), policy_setup(ctx, p, &table)?));
        }
    } else {
        let volts: Vec<f64> =
            if sw.voltages.is_empty() { table.rows().iter().map(|r| r.v_array).collect() } else { sw.voltages.clone() };
        for v in volts {
            members.push((format!("{v:.2}"), PolicySetup::fixed(*table.lookup(v)?)));
        }
    }

    let base_setup = PolicySetup::fixed(*table.nominal());
    let run = |s: &PolicySetup| run_simulation(&sys, &traces, s, &ctx.cfg.power).map_err(CliError::from);
    let (base, alone, results) = ctx.pool()?.install(|| {
        let (base, (alone, results)) = rayon::join(
            || run(&base_setup),
            || {
                rayon::join(
                    || alone_ipcs(ctx, &traces, &table),
                    || members.par_iter().map(|(_, s)| run(s)).collect::<Vec<_>>(),
                )
            },
        );
        (base, alone, results)
    });
    let base = base?;
    let alone = alone?;

    let mut csv = String::from(if by_policy { POLICY_SWEEP_HEADER } else { SWEEP_HEADER });
    csv.push('\n');
    let mut failure = None;
    for ((label, _), r) in members.iter().zip(results) {
        match r.and_then(|o| SweepRow::relative(&base, &o, &alone)) {
            Ok(row) => writeln!(csv, "{label},{}", row.csv_fields()).expect("string write"),
            Err(e) => {
                failure.get_or_insert(format!("sweep member {label} failed: {e}"));
            }
        }
    }
    let name = if by_policy { "sweep_policies.csv" } else { "sweep.csv" };
    if let Some(msg) = failure {
        let partial = ctx.write(&format!("{name}.partial"), &csv)?;
        return Err(CliError::Runtime(format!("{msg}; partial results in {}", partial.display())));
    }
    Ok(vec![ctx.write(name, &csv)?])
}

/// Characterization summary of one module.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DimmReport {
    pub profile: DimmProfile,
    pub vmin: VminScan,
    pub rounds: u32,
    /// Per tested voltage below Vmin, the smallest error-free latencies
    /// on the test grid, if any.
    pub min_latencies: Vec<MinLatency>,
    pub campaigns: Vec<CampaignSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MinLatency {
    pub voltage: f64,
    pub trcd_ns: Option<f64>,
    pub trp_ns: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CampaignSummary {
    pub voltage: f64,
    pub pattern: DataPatternPair,
    pub erroneous_line_fraction: f64,
    /// Beats with 0, 1, 2 and more than 2 flipped bits.
    pub beats: [u64; 4],
    pub heavy_beat_fraction: f64,
}

pub const ANOVA_HEADER: &str = "voltage,f,p,df_between,df_within";

/// One ANOVA line per voltage, with the patterns as groups. Voltages where
/// every round is error-free have no defined statistic and are skipped.
pub fn anova_table(rows: &[BerRow]) -> Result<String> {
    let mut volts: Vec<f64> = rows.iter().map(|r| r.voltage).collect();
    volts.sort_by(|a, b| b.total_cmp(a));
    volts.dedup();
    let mut out = format!("{ANOVA_HEADER}\n");
    for v in volts {
        let groups: Vec<Vec<f64>> = DataPatternPair::ALL
            .iter()
            .map(|&p| rows.iter().filter(|r| r.voltage == v && r.pattern == p).map(|r| r.ber).collect())
            .filter(|g: &Vec<f64>| !g.is_empty())
            .collect();
        match anova_oneway(&groups) {
            Ok(a) => writeln!(out, "{v},{},{},{},{}", a.f, a.p, a.df_between, a.df_within).expect("string write"),
            Err(Error::UndefinedStatistic(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

fn characterize_one(p: &DimmProfile, voltages: &[f64], rounds: u32) -> Result<(DimmReport, Vec<ErrorReport>)> {
    let vmin = find_vmin(p, RELIABLE_LATENCY_NS, RELIABLE_LATENCY_NS)?;
    let min_latencies = voltages
        .iter()
        .filter(|&&v| v < p.v_min)
        .map(|&v| {
            let m = find_min_latencies_experimental(p, v);
            MinLatency { voltage: v, trcd_ns: m.map(|x| x.0), trp_ns: m.map(|x| x.1) }
        })
        .collect();
    let jobs: Vec<(f64, DataPatternPair)> =
        voltages.iter().flat_map(|&v| DataPatternPair::ALL.map(|pat| (v, pat))).collect();
    let reports = jobs
        .par_iter()
        .map(|&(v, pat)| voltage_test(p, v, RELIABLE_LATENCY_NS, RELIABLE_LATENCY_NS, pat, rounds))
        .collect::<voltsim::Result<Vec<_>>>()?;
    let campaigns = reports
        .iter()
        .map(|r| CampaignSummary {
            voltage: r.v,
            pattern: r.pattern,
            erroneous_line_fraction: r.erroneous_line_fraction(),
            beats: r.beats.0,
            heavy_beat_fraction: r.beats.heavy_fraction(),
        })
        .collect();
    Ok((DimmReport { profile: p.clone(), vmin, rounds, min_latencies, campaigns }, reports))
}

/// Characterizes every configured module; `rounds` overrides the config.
pub fn cmd_characterize(ctx: &Context, rounds: Option<u32>) -> Result<Vec<PathBuf>> {
    let rounds = rounds.unwrap_or(ctx.cfg.characterize.rounds);
    if rounds == 0 {
        return Err(CliError::Usage("--rounds must be at least 1".into()));
    }
    let voltages = &ctx.cfg.characterize.voltages;
    if voltages.is_empty() {
        return Err(CliError::Usage("characterize.voltages is empty".into()));
    }
    let mut profiles = ctx.cfg.profiles()?;
    for p in &mut profiles {
        p.seed ^= ctx.seed;
        p.validate()?;
    }
    let pool = ctx.pool()?;
    let mut paths = Vec::new();
    for p in &profiles {
        let (report, campaigns) = pool.install(|| characterize_one(p, voltages, rounds))?;
        let dir = p.name.clone();
        paths.push(ctx.write(&format!("{dir}/dimm.json"), &json(&report))?);
        let ber: Vec<BerRow> = campaigns.iter().flat_map(BerRow::from_report).collect();
        paths.push(ctx.write(&format!("{dir}/ber.csv"), &ber_csv(&ber))?);
        paths.push(ctx.write(&format!("{dir}/anova.csv"), &anova_table(&ber)?)?);
        // Spatial map at the highest tested voltage that shows errors.
        if let Some(r) = campaigns
            .iter()
            .filter(|r| r.erroneous_lines > 0)
            .max_by(|a, b| a.v.total_cmp(&b.v).then(b.pattern.index().cmp(&a.pattern.index())))
        {
            paths.push(ctx.write(&format!("{dir}/heatmap.csv"), &spatial_heatmap(r).to_csv())?);
        }
    }
    Ok(paths)
}

pub fn cmd_anova(ctx: &Context, input: Option<&Path>) -> Result<Vec<PathBuf>> {
    let path = input
        .map(Path::to_path_buf)
        .or_else(|| ctx.cfg.anova.input.clone())
        .ok_or_else(|| CliError::Usage("anova needs a BER CSV (--input or anova.input)".into()))?;
    let rows = parse_ber_csv(&config::read(&path)?)?;
    Ok(vec![ctx.write("anova.csv", &anova_table(&rows)?)?])
}

pub const SAMPLES_HEADER: &str = "latency_ns,mpki,stall_fraction,observed_loss";

pub fn samples_csv(samples: &[LossSample]) -> String {
    let mut out = format!("{SAMPLES_HEADER}\n");
    for s in samples {
        writeln!(out, "{},{},{},{}", s.latency_ns, s.mpki, s.stall_fraction, s.observed_loss).expect("string write");
    }
    out
}

pub fn parse_samples_csv(text: &str) -> Result<Vec<LossSample>> {
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, h)| h) != Some(SAMPLES_HEADER) {
        return Err(CliError::Usage(format!("samples CSV must start with '{SAMPLES_HEADER}'")));
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<f64> = l
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| CliError::Usage(format!("samples CSV line {}: bad number", i + 1)))?;
            if f.len() != 4 {
                return Err(CliError::Usage(format!("samples CSV line {}: expected 4 fields", i + 1)));
            }
            Ok(LossSample { latency_ns: f[0], mpki: f[1], stall_fraction: f[2], observed_loss: f[3] })
        })
        .collect()
}

/// Runs every trace alone at every table voltage and records its
/// performance loss against nominal together with its nominal profile.
pub fn simulate_samples(ctx: &Context) -> Result<Vec<LossSample>> {
    let table = ctx.cfg.latency_table()?;
    let traces = ctx.traces()?;
    let mut sys = ctx.cfg.system.clone();
    sys.record_commands = false;
    let jobs: Vec<(usize, usize)> =
        (0..traces.len()).flat_map(|t| (0..table.rows().len()).map(move |r| (t, r))).collect();
    let cycles = ctx.pool()?.install(|| {
        jobs.par_iter()
            .map(|&(t, r)| {
                let out = run_simulation(
                    &sys,
                    std::slice::from_ref(&traces[t]),
                    &PolicySetup::fixed(table.rows()[r]),
                    &ctx.cfg.power,
                )?;
                Ok(out.stats.cores[0])
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let n = table.rows().len();
    let mut samples = Vec::new();
    for t in 0..traces.len() {
        let nominal = cycles[t * n];
        for r in 0..n {
            let c = cycles[t * n + r];
            let loss = if c.cycles == 0 { 0.0 } else { 100.0 * (1.0 - nominal.cycles as f64 / c.cycles as f64) };
            samples.push(LossSample {
                latency_ns: table.rows()[r].timings.predictor_latency_ns(),
                mpki: nominal.mpki,
                stall_fraction: nominal.stall_fraction,
                observed_loss: loss,
            });
        }
    }
    Ok(samples)
}

pub fn cmd_fit_predictor(ctx: &Context, input: Option<&Path>) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    let samples = match input.map(Path::to_path_buf).or_else(|| ctx.cfg.fit.input.clone()) {
        Some(p) => parse_samples_csv(&config::read(&p)?)?,
        None => {
            let s = simulate_samples(ctx)?;
            paths.push(ctx.write("samples.csv", &samples_csv(&s))?);
            s
        }
    };
    let report = fit_predictor(&samples, ctx.seed, ctx.cfg.fit.mpki_threshold)?;
    paths.push(ctx.write("predictor.json", &json(&report))?);
    paths.push(ctx.write("coefficients.json", &json(&report.coefficients))?);
    Ok(paths)
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
