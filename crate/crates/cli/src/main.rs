//! `sparsegate` command-line entry point.
//!
//! Exit codes: 0 success, 2 usage, 3 numeric failure, 4 I/O or format error.

mod args;
mod commands;
mod error;

use args::{Cli, Command};
use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => commands::cmd_train(a),
        Command::Rerun { manifest, out } => commands::cmd_rerun(manifest, out),
        Command::Sweep(a) => commands::cmd_sweep(a),
        Command::Prune(a) => commands::cmd_prune(a),
        Command::Eval(a) => commands::cmd_eval(a),
        Command::Bench(a) => commands::cmd_bench(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
