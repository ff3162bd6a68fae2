//! Binary entry point: parses arguments, dispatches to the library CLI, and
//! converts errors into the documented exit codes.

use clap::Parser;

use domainsense::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {}", err);
            std::process::exit(err.exit_code());
        }
    }
}
