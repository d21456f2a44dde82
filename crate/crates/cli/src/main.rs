use clap::Parser;
use promptprf_cli::{execute, Cli};
use tracing_subscriber::EnvFilter;

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    if let Err(e) = execute(cli, argv) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
