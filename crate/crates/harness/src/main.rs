use std::process::ExitCode;

use clap::Parser;
use maskdiff_harness::cli::{main_with, Cli};

fn main() -> ExitCode {
    main_with(Cli::parse())
}
