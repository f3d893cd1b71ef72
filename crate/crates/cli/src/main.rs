use std::process::ExitCode;

fn main() -> ExitCode {
    let args: Vec<std::ffi::OsString> = std::env::args_os().collect();
    // help and version requests surface as clap "errors" printed to stdout
    if let Err(e) = graphalign_cli::command().try_get_matches_from(&args) {
        if !e.use_stderr() {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match graphalign_cli::run(args, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
