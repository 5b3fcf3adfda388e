use std::process::ExitCode;

fn main() -> ExitCode {
    match connseg_cli::run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !e.is_silent() {
                eprintln!("connseg: {e}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
