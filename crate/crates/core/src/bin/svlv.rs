use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use svlv::harness::{run_command, Command, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(name = "svlv", version, about = "Voter-model perturbation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Experiment config (TOML or JSON).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; defaults to `run.seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `output.dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run replicas per N and write terminal summaries.
    Simulate(Common),
    /// Estimate coalescing constants and the limiting drift.
    EstimateConstants(Common),
    /// Compare drift, branching rate and diffusivity with their limits across the N ladder.
    VerifyConvergence(Common),
    /// Check the monotone coupling and the biased voter moment bounds.
    CouplingCheck(Common),
    /// Check the martingale decomposition on simulated paths.
    DecompositionCheck(Common),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (command, common) = match cli.command {
        Cmd::Simulate(c) => (Command::Simulate, c),
        Cmd::EstimateConstants(c) => (Command::EstimateConstants, c),
        Cmd::VerifyConvergence(c) => (Command::VerifyConvergence, c),
        Cmd::CouplingCheck(c) => (Command::CouplingCheck, c),
        Cmd::DecompositionCheck(c) => (Command::DecompositionCheck, c),
    };
    let cfg = match ExperimentConfig::load(&common.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("svlv: config error: {e}");
            return ExitCode::from(1);
        }
    };
    let out = match common.out.or_else(|| cfg.output.dir.clone()) {
        Some(o) => o,
        None => {
            eprintln!("svlv: no output directory (pass --out or set output.dir)");
            return ExitCode::from(1);
        }
    };
    let seed = common.seed.unwrap_or(cfg.run.seed);
    match run_command(command, &cfg, seed, &out) {
        Ok(report) => {
            for g in &report.gates {
                println!("{} {}: {}", if g.passed { "PASS" } else { "FAIL" }, g.name, g.detail);
            }
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            ExitCode::from(report.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("svlv {}: {e}", command.name());
            ExitCode::from(1)
        }
    }
}
