//! `ssip`: data preparation, training, evaluation, support-count sweeps and
//! analysis plots from the command line.
//!
//! Failures print a single JSON error record on standard error and exit
//! with a nonzero status.

mod args;
mod commands;
mod error;
mod plot;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use error::CliError;

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Prepare(a) => commands::cmd_prepare(a),
        Command::Calibrate(a) => commands::cmd_calibrate(a),
        Command::Train(a) => commands::cmd_train(a),
        Command::Evaluate(a) => commands::cmd_evaluate(a),
        Command::Predict(a) => commands::cmd_predict(a),
        Command::SweepSupport(a) => commands::cmd_sweep(a),
        Command::Analyze(a) => commands::cmd_analyze(a),
        Command::Plot(a) => commands::cmd_plot(a),
        Command::Synth(a) => commands::cmd_synth(a),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let err = CliError::Usage(e.to_string().trim().to_owned());
            eprintln!("{}", err.record());
            std::process::exit(err.exit_code());
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("{}", err.record());
        std::process::exit(err.exit_code());
    }
}
