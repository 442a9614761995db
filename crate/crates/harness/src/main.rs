use clap::Parser;
use timesaf_harness::cli::{run, Cli};

fn main() {
    match run(Cli::parse()) {
        Ok(text) => print!("{text}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
