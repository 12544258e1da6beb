use clap::Parser;
use shape_bench::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
