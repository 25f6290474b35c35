use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use voltsim_cli::{
    cmd_anova, cmd_bitline, cmd_characterize, cmd_fit_predictor, cmd_latency_table, cmd_simulate, cmd_sweep, CliError,
    Context, RunConfig,
};

#[derive(Parser)]
#[command(name = "voltsim", version, about = "Reduced-voltage DRAM simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Voltage to timing table.
    LatencyTable(Common),
    /// Bitline voltage trajectory of one ACT/PRE cycle.
    Bitline(Common),
    /// One simulation with the configured policy.
    Simulate(Common),
    /// Voltage (or policy) sweep against the nominal baseline.
    Sweep(Common),
    /// Error characterization of the configured DIMM profiles.
    Characterize {
        #[command(flatten)]
        common: Common,
        /// Test rounds per voltage and pattern.
        #[arg(long)]
        rounds: Option<u32>,
    },
    /// Data-pattern ANOVA over a BER CSV.
    Anova {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Fits the performance-loss predictor.
    FitPredictor {
        #[command(flatten)]
        common: Common,
        /// Samples CSV; simulated from the traces when absent.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trace file or builtin:<name>[:<records>]; one per core.
    #[arg(long)]
    trace: Vec<String>,
    /// fixed, voltron, voltron_bl or memdvfs.
    #[arg(long)]
    policy: Option<String>,
    /// Target performance loss in percent.
    #[arg(long)]
    target_loss: Option<f64>,
    #[arg(long, env = "VOLTSIM_SEED")]
    seed: Option<u64>,
    /// Worker threads for sweeps and campaigns.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn context(&self) -> Result<Context, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if !self.trace.is_empty() {
            cfg.traces = self.trace.clone();
        }
        if let Some(p) = &self.policy {
            cfg.policy.name = p.clone();
        }
        if let Some(t) = self.target_loss {
            cfg.policy.target_loss = t;
        }
        let seed = self.seed.or(cfg.seed).unwrap_or(1);
        Context::new(cfg, seed, self.jobs, self.out_dir.clone())
    }
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    match cli.command {
        Command::LatencyTable(c) => cmd_latency_table(&c.context()?),
        Command::Bitline(c) => cmd_bitline(&c.context()?),
        Command::Simulate(c) => cmd_simulate(&c.context()?),
        Command::Sweep(c) => cmd_sweep(&c.context()?),
        Command::Characterize { common, rounds } => cmd_characterize(&common.context()?, rounds),
        Command::Anova { common, input } => cmd_anova(&common.context()?, input.as_deref()),
        Command::FitPredictor { common, input } => cmd_fit_predictor(&common.context()?, input.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("voltsim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
