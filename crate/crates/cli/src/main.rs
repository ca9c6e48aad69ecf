mod args;
mod commands;
mod error;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use error::CliError;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            std::process::exit(0);
        }
        Err(e) => {
            let err = CliError::Usage(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            std::process::exit(err.exit_code());
        }
    };
    let result = match &cli.command {
        Command::MakeToy(a) => commands::make_toy(a),
        Command::Run(a) => commands::run(a),
        Command::Ppl(a) => commands::ppl(a),
        Command::Sim(a) => commands::sim(a),
        Command::Var(a) => commands::var(a),
        Command::Budget(a) => commands::budget(a),
        Command::Parity(a) => commands::parity(a),
    };
    match result {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("{}", err.to_json());
            std::process::exit(err.exit_code());
        }
    }
}
