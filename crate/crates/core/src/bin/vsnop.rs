use clap::Parser;

fn main() {
    let cli = vsnop::cli::Cli::parse();
    if let Err(e) = vsnop::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
