//! Experiment commands behind the `prosody` binary.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{run, Cli, Command};
pub use config::ExperimentConfig;
pub use error::CliError;

use clap::Parser;

/// Parse `args` (program name first) and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
