use clap::Parser;

fn main() {
    let cli = gsrc::cli::Cli::parse();
    if let Err(e) = gsrc::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
