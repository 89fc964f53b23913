use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fedbilevel::config::{parse_seeds, Axis, ExperimentConfig};
use fedbilevel::executor::Workers;
use fedbilevel::output::{write_sweep, write_trace};
use fedbilevel::sweep::{run_sweep, SweepOptions};
use fedbilevel::verify::verify;
use fedbilevel::{run_seeds, setup, Problem};

#[derive(Parser)]
#[command(name = "fedbilevel", version, about = "Federated stochastic bilevel optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration over all seeds and write the trace CSV.
    Run(RunArgs),
    /// Sweep one parameter and write iterations/samples/rounds to epsilon.
    Sweep(SweepArgs),
    /// Run the self-check suite; exits nonzero if any check fails.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output CSV; defaults to `[output] path`, then stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds as `0,1,2` or `0..5`; overrides `federation.seeds`.
    #[arg(long)]
    seeds: Option<String>,
    /// Worker threads (0 = all cores). Output does not depend on it.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// K, p, Q or algorithm; overrides `sweep.axis`.
    #[arg(long, value_parser = str::parse::<Axis>)]
    axis: Option<Axis>,
    /// Comma-separated values; overrides `sweep.values`.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<String>>,
    /// Running-metric threshold; overrides `sweep.epsilon`.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Fill the wall_time_s column (makes output nondeterministic).
    #[arg(long)]
    timing: bool,
    /// Test only: flip the sign of the mixed second-derivative term.
    #[arg(long)]
    fault_inject: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Optional config selecting the QuadQuad instance.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report CSV; defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Test only: flip the sign of the mixed second-derivative term.
    #[arg(long)]
    fault_inject: bool,
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load(common: &Common) -> Result<(ExperimentConfig, Option<PathBuf>, Workers)> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seeds) = &common.seeds {
        cfg.federation.seeds = parse_seeds(seeds).map_err(anyhow::Error::msg).context("--seeds")?;
    }
    cfg.validate()?;
    let out = common.out.clone().or_else(|| cfg.output.path.clone());
    Ok((cfg, out, Workers::new(common.workers)?))
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let (cfg, out, workers) = load(&args.common)?;
    let problem = Problem::build(&cfg.problem, false)?;
    let s = setup(&cfg, &problem)?;
    let runs = run_seeds(&s, &problem, &cfg.federation.seeds, &workers)?;
    write_trace(open_out(out.as_deref())?, &runs)
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let (cfg, out, workers) = load(&args.common)?;
    let Some(axis) = args.axis.or(cfg.sweep.axis) else {
        bail!("invalid value for `sweep.axis`: no axis given (use --axis or [sweep] axis)");
    };
    let values = args.values.unwrap_or_else(|| cfg.sweep.values.clone());
    let Some(epsilon) = args.epsilon.or(cfg.sweep.epsilon) else {
        bail!("invalid value for `sweep.epsilon`: no threshold given (use --epsilon or [sweep] epsilon)");
    };
    let opts = SweepOptions {
        axis,
        values,
        epsilon,
        seeds: cfg.federation.seeds.clone(),
        fault: args.fault_inject,
        timing: args.timing,
    };
    let result = run_sweep(&cfg, &opts, &workers)?;
    write_sweep(open_out(out.as_deref())?, &result)
}

fn cmd_verify(args: VerifyArgs) -> Result<bool> {
    let cfg = args.config.as_deref().map(ExperimentConfig::load).transpose()?;
    let report = verify(cfg.as_ref(), args.fault_inject)?;
    report.write_csv(open_out(args.out.as_deref())?)?;
    for c in report.checks.iter().filter(|c| !c.passed()) {
        eprintln!("FAILED {}: {} vs {}", c.name, c.measured, c.threshold);
    }
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a).map(|_| true),
        Command::Sweep(a) => cmd_sweep(a).map(|_| true),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
