use clap::Parser;
use formation_fdi::cli::{execute, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = execute(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
