use clap::Parser;

fn main() {
    let cli = necst::cli::Cli::parse();
    if let Err(e) = necst::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
