use clap::Parser;

fn main() {
    std::process::exit(pdmpclt_cli::run(pdmpclt_cli::Cli::parse()));
}
