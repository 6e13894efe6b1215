use std::io::Write;

use clap::Parser;
use evqr::cli::{run, Cli};

fn main() {
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Warn)
        .format(|buf, record| writeln!(buf, "{}: {}", record.level().as_str().to_lowercase(), record.args()))
        .init();
    std::process::exit(run(Cli::parse()));
}
