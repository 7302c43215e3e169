use clap::Parser;

fn main() {
    let cli = trajdiff::cli::Cli::parse();
    if let Err(e) = trajdiff::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
