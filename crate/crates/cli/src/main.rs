use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fedpecd::harness::{self, SweepConfig, SyntheticSpec};
use fedpecd::protocol::{self, RunConfig, Variant};
use fedpecd::Scenario;

#[derive(Parser)]
#[command(name = "fedpecd", version, about = "Federated phased elimination with hidden contexts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic scenario and write it as JSON.
    Generate(GenerateArgs),
    /// Run the protocol once.
    Run(RunArgs),
    /// Average regret curves over trials for several variants and agent counts.
    Sweep(SweepArgs),
    /// Load a scenario file and check every constraint.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Synthetic,
    Movielens,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Exact,
    Hidden,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Exact => Variant::Exact,
            VariantArg::Hidden => Variant::Hidden,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum, default_value = "synthetic")]
    profile: Profile,
    /// Number of agents.
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long)]
    arms: Option<usize>,
    #[arg(long)]
    perturbation: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Give every agent a point mass at its own context.
    #[arg(long)]
    exact: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProtocolArgs {
    #[arg(long, default_value_t = 1)]
    c: u64,
    #[arg(long, default_value_t = 2)]
    n: u64,
    #[arg(long)]
    horizon: Option<u64>,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the scenario's noise level.
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "hidden")]
    variant: VariantArg,
    /// Use only the first M agents of the scenario.
    #[arg(long)]
    agents: Option<usize>,
    #[command(flatten)]
    protocol: ProtocolArgs,
    /// Write a JSON-lines trace.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Print communication counts per phase.
    #[arg(long)]
    meter: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Repeat to sweep several variants; both by default.
    #[arg(long, value_enum)]
    variant: Vec<VariantArg>,
    /// Comma-separated agent counts.
    #[arg(long, value_delimiter = ',')]
    agents: Vec<usize>,
    #[arg(long)]
    trials: Option<usize>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[arg(long)]
    out_json: Option<PathBuf>,
    /// T = 2^17, 100 trials, M in {50, 100, 150} unless overridden.
    #[arg(long = "paper-scale")]
    full_scale: bool,
    #[command(flatten)]
    protocol: ProtocolArgs,
    /// Print total communication per cell to stderr.
    #[arg(long)]
    meter: bool,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate(a) => generate(a),
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Validate { scenario } => {
            let s = harness::load_features(&scenario).with_context(|| format!("validating {}", scenario.display()))?;
            println!("ok: K = {}, d = {}, M = {}", s.arms(), s.dim(), s.agents());
            Ok(())
        }
    }
}

fn output(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut spec = match a.profile {
        Profile::Synthetic => SyntheticSpec::default(),
        Profile::Movielens => SyntheticSpec::movielens_like(),
    };
    if let Some(m) = a.agents {
        spec.agents = m;
    }
    if let Some(k) = a.arms {
        spec.arms = k;
    }
    if let Some(p) = a.perturbation {
        spec.perturbation = p;
    }
    if let Some(s) = a.sigma {
        spec.sigma = s;
    }
    spec.exact = a.exact;
    let s = harness::generate_synthetic(&spec, a.seed)?;
    let mut out = output(a.out.as_ref())?;
    serde_json::to_writer_pretty(&mut out, &s.to_file())?;
    writeln!(out)?;
    Ok(())
}

fn scenario_or_default(path: Option<&PathBuf>, agents: usize, seed: u64) -> Result<Scenario> {
    match path {
        Some(p) => harness::load_features(p).with_context(|| format!("loading {}", p.display())),
        None => {
            let spec = SyntheticSpec {
                agents,
                ..SyntheticSpec::default()
            };
            Ok(harness::generate_synthetic(&spec, seed)?)
        }
    }
}

fn run(a: RunArgs) -> Result<()> {
    let p = &a.protocol;
    let mut s = scenario_or_default(a.scenario.as_ref(), a.agents.unwrap_or(25), p.seed)?;
    if let Some(m) = a.agents {
        s = s.with_agents(m)?;
    }
    let schedule = protocol::build_schedule(p.c, p.n, s.arms(), p.horizon.unwrap_or(harness::DESK_HORIZON))?;
    let cfg = RunConfig {
        variant: a.variant.into(),
        delta: p.delta,
        sigma: p.sigma,
        record_models: a.trace_out.is_some(),
        ..RunConfig::default()
    };
    let trace = protocol::run_protocol(&s, &schedule, &cfg, p.seed)?;
    if let Some(path) = &a.trace_out {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        protocol::write_trace(&trace, BufWriter::new(f))?;
    }
    println!(
        "variant={} M={} K={} d={} T={} H={} alpha={:.6} final_mean_regret={:.6}",
        trace.variant.name(),
        trace.agents,
        trace.arms,
        trace.dim,
        schedule.horizon,
        schedule.phases(),
        trace.confidence.alpha,
        trace.final_regret()
    );
    if a.meter {
        println!("phase,scalars_up,scalars_down");
        for ph in &trace.meter.phases {
            println!("{},{},{}", ph.phase, ph.up, ph.down);
        }
        println!("total,{},{}", trace.meter.scalars_up, trace.meter.scalars_down);
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let p = &a.protocol;
    let mut cfg = if a.full_scale {
        SweepConfig::full_scale()
    } else {
        SweepConfig::default()
    };
    if !a.variant.is_empty() {
        cfg.variants = a.variant.iter().map(|&v| v.into()).collect();
    }
    if !a.agents.is_empty() {
        cfg.agents = a.agents.clone();
    }
    if let Some(t) = a.trials {
        cfg.trials = t;
    }
    if let Some(h) = p.horizon {
        cfg.horizon = h;
    }
    cfg.c = p.c;
    cfg.n = p.n;
    cfg.delta = p.delta;
    cfg.sigma = p.sigma;
    cfg.seed = p.seed;
    cfg.workers = a.workers;
    let max_m = *cfg.agents.iter().max().expect("agent list is nonempty");
    let s = scenario_or_default(a.scenario.as_ref(), max_m, p.seed)?;
    if s.agents() < max_m {
        bail!("scenario has {} agents, sweep needs {max_m}", s.agents());
    }
    let result = harness::run_sweep(&s, &cfg)?;
    result.write_csv(output(a.out_csv.as_ref())?)?;
    if let Some(path) = &a.out_json {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        result.write_json(BufWriter::new(f))?;
    }
    if a.meter {
        for cell in &result.cells {
            let mean = cell.trials.iter().map(|t| t.comm_scalars as f64).sum::<f64>() / cell.trials.len() as f64;
            eprintln!("{} M={} mean_scalars={mean:.1}", cell.variant.name(), cell.agents);
        }
    }
    Ok(())
}
