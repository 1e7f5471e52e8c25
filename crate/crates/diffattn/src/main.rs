use std::process::ExitCode;

fn main() -> ExitCode {
    diffattn::commands::main_entry()
}
