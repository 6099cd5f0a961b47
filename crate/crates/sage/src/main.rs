use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(sage::cli::run(std::env::args()) as u8)
}
