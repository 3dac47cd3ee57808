use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mgx_core::config::ExperimentConfig;
use mgx_core::harness::{run_campaign, verify, Campaign};
use mgx_core::perf::{simulate, sweep, write_stats_csv, Scheme, SimError, SweepParam};

const EXIT_CONFIG: u8 = 2;
const EXIT_TAMPER: u8 = 3;
const EXIT_UNDETECTED: u8 = 4;
const EXIT_MISMATCH: u8 = 5;

#[derive(Parser, Debug)]
#[command(
    name = "mgxsim",
    version,
    about = "Memory protection simulator for accelerators"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment file (TOML); flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// none, baseline or mgx.
    #[arg(long, global = true)]
    scheme: Option<String>,
    /// Preset (lenet, resnet50:training, pruned:alexnet, rnn, h264, gact, ...) or network file.
    #[arg(long, global = true)]
    workload: Option<String>,
    #[arg(long, global = true)]
    channels: Option<u32>,
    #[arg(long, global = true)]
    cache_kb: Option<u64>,
    #[arg(long, global = true)]
    region_mb: Option<u64>,
    #[arg(long, global = true)]
    mac_granularity: Option<u64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Events CSV to replay instead of the generated events.
    #[arg(long, global = true, value_name = "PATH")]
    trace: Option<PathBuf>,
    /// Writes the workload's events CSV here before running.
    #[arg(long, global = true, value_name = "PATH")]
    dump_trace: Option<PathBuf>,
    /// Output CSV; standard output when absent.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one workload under one scheme.
    Run,
    /// Simulate once per parameter value.
    Sweep {
        /// cache_kb, region_mb or channels.
        #[arg(long)]
        param: Option<String>,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<u64>>,
    },
    /// Inject randomized tampering and report how much was detected.
    Attack {
        /// bitflip, replay, relocate or splice.
        #[arg(long)]
        campaign: Option<String>,
        #[arg(long)]
        trials: Option<u32>,
    },
    /// Replay with real cryptography and check every load.
    Verify,
}

enum Failure {
    Sim(SimError),
    Io(String),
    Undetected(String),
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        Failure::Sim(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

fn build_config(c: &Common, cmd: &Command) -> Result<ExperimentConfig, SimError> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = &c.scheme {
        cfg.scheme = s.parse()?;
    }
    if let Some(w) = &c.workload {
        cfg.workload = w.clone();
    }
    if let Some(v) = c.channels {
        cfg.dram.channels = v;
    }
    if let Some(v) = c.cache_kb {
        cfg.baseline.cache_kb = v;
    }
    if let Some(v) = c.region_mb {
        cfg.baseline.region_mb = Some(v);
    }
    if let Some(v) = c.mac_granularity {
        cfg.mgx.mac_granularity = v;
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(p) = &c.trace {
        cfg.trace = Some(p.clone());
    }
    if let Some(p) = &c.out {
        cfg.out = Some(p.clone());
    }
    match cmd {
        Command::Sweep { param, values } => {
            if let Some(p) = param {
                cfg.sweep.param = p.parse::<SweepParam>()?;
            }
            if let Some(v) = values {
                cfg.sweep.values = v.clone();
            }
        }
        Command::Attack { campaign, trials } => {
            if let Some(c) = campaign {
                cfg.attack.campaign = c.parse::<Campaign>()?;
            }
            if let Some(t) = trials {
                cfg.attack.trials = *t;
            }
        }
        Command::Run | Command::Verify => {}
    }
    Ok(cfg)
}

fn output(cfg: &ExperimentConfig) -> Result<Box<dyn Write>, Failure> {
    Ok(match &cfg.out {
        Some(p) => {
            Box::new(File::create(p).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?)
        }
        None => Box::new(io::stdout().lock()),
    })
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let cfg = build_config(&cli.common, &cli.command)?;
    let trace = cfg.build_trace()?;
    if let Some(p) = &cli.common.dump_trace {
        trace.write_csv(File::create(p)?)?;
    }
    let sim = cfg.sim_config(&trace)?;
    match &cli.command {
        Command::Run => {
            let stats = simulate(&trace, cfg.scheme, &sim).map_err(|f| f.error)?;
            write_stats_csv(&[stats.row(None)], output(&cfg)?)?;
        }
        Command::Sweep { .. } => {
            let rows = sweep(&trace, cfg.scheme, &sim, cfg.sweep.param, &cfg.sweep.values)
                .map_err(|f| f.error)?;
            let rows: Vec<_> = rows
                .iter()
                .map(|r| r.stats.row(Some((r.param, r.value))))
                .collect();
            write_stats_csv(&rows, output(&cfg)?)?;
        }
        Command::Attack { .. } => {
            if cfg.scheme == Scheme::None {
                return Err(
                    SimError::Config("attack needs --scheme baseline or mgx".into()).into(),
                );
            }
            let r = run_campaign(
                &trace,
                cfg.scheme,
                &sim,
                cfg.attack.campaign,
                cfg.attack.trials,
                cfg.seed,
            )?;
            let mut w = csv::Writer::from_writer(output(&cfg)?);
            w.write_record([
                "scheme",
                "workload",
                "campaign",
                "trials",
                "detected",
                "undetected",
            ])?;
            w.write_record([
                r.scheme.to_string(),
                trace.name.clone(),
                r.campaign.to_string(),
                r.trials.to_string(),
                r.detected.to_string(),
                (r.trials - r.detected).to_string(),
            ])?;
            w.flush()?;
            if let Some(m) = r.misses.first() {
                return Err(Failure::Undetected(format!(
                    "{} of {} tampers undetected; first: trial {} at event {} ({}): {}",
                    r.trials - r.detected,
                    r.trials,
                    m.trial,
                    m.event,
                    m.action,
                    m.outcome
                )));
            }
        }
        Command::Verify => {
            let r = verify(&trace, cfg.scheme, &sim)?;
            let mut w = csv::Writer::from_writer(output(&cfg)?);
            w.write_record([
                "scheme",
                "workload",
                "events",
                "loads",
                "ledger_pairs",
                "result",
            ])?;
            w.write_record([
                r.scheme.to_string(),
                trace.name.clone(),
                r.events.to_string(),
                r.loads.to_string(),
                r.ledger_pairs.map(|p| p.to_string()).unwrap_or_default(),
                "pass".to_string(),
            ])?;
            w.flush()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let verifying = matches!(cli.command, Command::Verify);
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Sim(e)) => {
            eprintln!("mgxsim: {e}");
            ExitCode::from(match e {
                SimError::Config(_) => EXIT_CONFIG,
                SimError::Tamper(_) if !verifying => EXIT_TAMPER,
                _ => EXIT_MISMATCH,
            })
        }
        Err(Failure::Io(e)) => {
            eprintln!("mgxsim: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Undetected(e)) => {
            eprintln!("mgxsim: {e}");
            ExitCode::from(EXIT_UNDETECTED)
        }
    }
}
