fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = qpi_cli::configure_threads() {
        eprintln!("qpi: {e}");
        std::process::exit(e.exit_code());
    }
    std::process::exit(qpi_cli::main_with_args(std::env::args_os()));
}
