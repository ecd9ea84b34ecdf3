use std::process::ExitCode;

fn main() -> ExitCode {
    flashkit::cli::main()
}
