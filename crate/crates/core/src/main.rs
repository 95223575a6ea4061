use clap::Parser;

fn main() {
    let cli = spil::cli::Cli::parse();
    if let Err(e) = spil::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
