//! Binary entry point: parse, run, map errors to exit codes.

use clap::Parser;

fn main() {
    let cli = did_cli::Cli::parse();
    if let Err(err) = did_cli::run(cli) {
        let (category, code) = if err.is_validation() {
            ("validation", 2)
        } else {
            ("runtime", 3)
        };
        eprintln!("{category}: {err}");
        std::process::exit(code);
    }
}
