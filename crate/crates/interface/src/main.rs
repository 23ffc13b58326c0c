use std::process::ExitCode;

use clap::Parser;
use conceptpath::kgstore::StoreError;
use conceptpath_interface::cli::Cli;
use conceptpath_interface::commands;

const EXIT_FAILURE: u8 = 1;
const EXIT_SCHEMA: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match commands::run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAILURE),
        Err(e) => {
            eprintln!("error: {e:#}");
            let schema = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<StoreError>(), Some(StoreError::SchemaMismatch { .. })));
            ExitCode::from(if schema { EXIT_SCHEMA } else { EXIT_FAILURE })
        }
    }
}
