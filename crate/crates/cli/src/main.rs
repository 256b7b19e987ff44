use std::process::ExitCode;

use clap::Parser;
use stablerep_cli::{dispatch, Cli, CliError};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                // --help and --version
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            let record = CliError::Usage(e.kind().to_string()).record();
            eprintln!("{record}");
            return ExitCode::from(2);
        }
    };
    match dispatch(cli) {
        Ok(serde_json::Value::Null) => ExitCode::SUCCESS,
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::FAILURE
        }
    }
}
