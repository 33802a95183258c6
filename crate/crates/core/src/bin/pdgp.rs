use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pdgp::runner::{compare, run, Mode, RunError, RunSpec};

#[derive(Parser)]
#[command(name = "pdgp", about = "Online primal-dual demand response with learned user costs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one scenario and write steps.csv, summary.json and GP snapshots.
    Run {
        /// Scenario TOML; the built-in default scenario when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// gp, gp_plain or clairvoyant.
        #[arg(long, default_value = "gp")]
        mode: Mode,
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this many steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "out")]
        output_dir: PathBuf,
        /// Solve the regret oracle every this many steps.
        #[arg(long)]
        oracle_cadence: Option<usize>,
    },
    /// Align the running metrics of several runs into one CSV.
    Compare {
        #[arg(required = true, num_args = 2..)]
        run_dirs: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), RunError> {
    match cli.cmd {
        Cmd::Run { config, mode, seed, steps, output_dir, oracle_cadence } => {
            let spec = RunSpec { config_path: config, mode, seed, output_dir, steps_override: steps, oracle_cadence };
            let out = run(&spec)?;
            for w in &out.summary.warnings {
                eprintln!("warning: {w}");
            }
            let s = &out.summary;
            println!(
                "mode={} seed={} steps={} regret={} acv={} xi={} feasible={:.4}",
                s.mode, s.seed, s.steps, s.regret_global, s.acv, s.xi, s.feasible_fraction
            );
            Ok(())
        }
        Cmd::Compare { run_dirs, output } => {
            let table = compare(&run_dirs)?;
            match output {
                Some(p) => std::fs::write(&p, table).map_err(|e| RunError::Io(format!("{}: {e}", p.display()))),
                None => {
                    print!("{table}");
                    Ok(())
                }
            }
        }
    }
}
