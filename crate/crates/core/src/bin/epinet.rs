use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use epinet::cli::{exit_code, parse_scenario, run, Command, Overrides};

#[derive(Parser)]
#[command(name = "epinet", version, about = "SIR epidemics with degree-dependent vaccination")]
struct Args {
    #[command(subcommand)]
    command: Cmd,
    /// Scenario file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Base seed for graph generation and simulation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 lets the pool decide.
    #[arg(long, global = true, env = "EPINET_THREADS")]
    threads: Option<usize>,
    /// Override the integration step.
    #[arg(long, global = true)]
    dt: Option<f64>,
    /// Report the step-doubling difference of the fluid run.
    #[arg(long, global = true)]
    check_steps: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Integrate the closed fluid system.
    Fluid,
    /// Stochastic simulation on sampled configuration-model graphs.
    Simulate,
    /// Social cost over a grid of vaccination thresholds.
    Optimize,
    /// Per-degree switch times of the individual best response.
    BestResponse,
    /// Forward-backward sweep for the socially optimal schedule.
    Sweep,
    /// Reproduction number and final epidemic sizes.
    FinalSize,
    /// Betweenness, density, clustering and closeness of sampled graphs.
    Metrics,
    /// The full reference suite.
    Reproduce,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Fluid => Command::Fluid,
            Cmd::Simulate => Command::Simulate,
            Cmd::Optimize => Command::Optimize,
            Cmd::BestResponse => Command::BestResponse,
            Cmd::Sweep => Command::Sweep,
            Cmd::FinalSize => Command::FinalSize,
            Cmd::Metrics => Command::Metrics,
            Cmd::Reproduce => Command::Reproduce,
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let Some(config) = args.config else {
        eprintln!("error: --config <path> is required");
        return ExitCode::from(1);
    };
    let overrides = Overrides {
        seed: args.seed,
        dt: args.dt,
        check_steps: args.check_steps,
    };
    let result = parse_scenario(&config)
        .and_then(|sc| run(args.command.into(), &sc, &overrides, &args.out));
    match result {
        Ok(manifest) => {
            for f in &manifest.files {
                println!("{}", args.out.join(f).display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
