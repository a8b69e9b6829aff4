use std::process::ExitCode;

fn main() -> ExitCode {
    critmap::cli::main_entry()
}
