use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(stelab::cli::main_with(std::env::args_os(), std::env::vars()))
}
