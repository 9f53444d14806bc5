use std::process::ExitCode;

fn main() -> ExitCode {
    semadapt::cli::main_with_args(std::env::args_os())
}
