use std::process::ExitCode;

fn main() -> ExitCode {
    ldva::cli::run_from(std::env::args_os())
}
