use std::process::ExitCode;

fn main() -> ExitCode {
    icestack_cli::run(std::env::args_os())
}
