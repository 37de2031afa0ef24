use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use decor_cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DECOR_LOG", "info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(value) => {
            let text = serde_json::to_string_pretty(&value).expect("json output");
            // A closed pipe on stdout is not a failure of the command.
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
