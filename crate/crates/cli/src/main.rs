use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use impakt::{run, Command, RunOptions};

/// Solves, cross-checks and hedges under permanent price impact.
#[derive(Parser, Debug)]
#[command(name = "impakt", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// Experiment config in `key = value` form.
    #[arg(long)]
    config: PathBuf,
    /// Treat numerical health failures as errors (exit 4).
    #[arg(long)]
    strict: bool,
    /// Artifact directory; overrides `outputs.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let opts = RunOptions { command: args.command, config: args.config, strict: args.strict, out: args.out };
    match run(&opts) {
        Ok(dir) => {
            println!("artifacts written to {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("impakt: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
