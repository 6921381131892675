use clap::Parser;
use radgan::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli, std::env::args().collect(), std::env::vars()) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
