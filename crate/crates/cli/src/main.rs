mod args;
mod commands;
mod manifest;

use clap::Parser;

fn main() {
    let cli = args::Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    log::debug!("running {}", cli.command.name());
    if let Err(e) = commands::run(&cli.command, None) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
