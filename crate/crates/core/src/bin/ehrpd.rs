use std::process::ExitCode;

fn main() -> ExitCode {
    ehrpd::cli::main()
}
