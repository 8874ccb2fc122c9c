use clap::Parser;

fn main() {
    let cli = ecgcbam::cli::Cli::parse();
    if let Err(e) = ecgcbam::cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
