use std::process::ExitCode;

fn main() -> ExitCode {
    kdlab::cli::run(std::env::args_os())
}
