use std::process::ExitCode;

fn main() -> ExitCode {
    dgrpo::harness::cli::run_cli(std::env::args_os())
}
