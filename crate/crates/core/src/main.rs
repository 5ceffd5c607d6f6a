use std::process::ExitCode;

fn main() -> ExitCode {
    phasescope::cli::main_with_args(std::env::args_os())
}
