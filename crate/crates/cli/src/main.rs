use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(vnnet_cli::run(std::env::args_os()))
}
