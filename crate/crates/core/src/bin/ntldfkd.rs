use std::io::Write;
use std::process::ExitCode;

fn main() -> ExitCode {
    match ntldfkd::evalcli::cli::run(std::env::args_os()) {
        Ok(msg) => {
            // A closed pipe (`| head`) is not worth a panic.
            let _ = writeln!(std::io::stdout(), "{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
