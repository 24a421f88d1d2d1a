mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind as ClapErrorKind;
use clap::{Parser, Subcommand};
use ltdqg_core::ErrorKind;

/// Product question generation with learning-to-diversify fine-tuning.
///
/// Set LTDQG_LOG (error, warn, info, debug, trace) to change log verbosity.
#[derive(Debug, Parser)]
#[command(name = "ltdqg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic product/question corpus as JSON lines
    Synth(commands::SynthArgs),
    /// Train a model in traditional or LTD mode
    Train(commands::TrainArgs),
    /// Generate questions for one split of a corpus with diverse beam search
    Generate(commands::GenerateArgs),
    /// Score generations against gold questions
    Evaluate(commands::EvaluateArgs),
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LTDQG_LOG", "info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Synth(args) => commands::synth(args),
        Command::Train(args) => commands::train(args),
        Command::Generate(args) => commands::generate(args),
        Command::Evaluate(args) => commands::evaluate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.kind() == ErrorKind::Usage {
                eprintln!("run `ltdqg --help` for usage");
            }
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
