use std::process::ExitCode;

fn main() -> ExitCode {
    let cli = match kgrg_cli::args::parse_from(std::env::args_os()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let level = kgrg_cli::log_level(std::env::var("KGRG_LOG").ok().as_deref());
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .init();
    match kgrg_cli::run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
