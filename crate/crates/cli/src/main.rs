use clap::Parser;

fn main() {
    let cli = mtcolor_cli::cli::Cli::parse();
    if let Err(e) = mtcolor_cli::cli::run(cli) {
        let msg = format!("{e:#}");
        eprintln!("error: {}", msg.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join("; "));
        std::process::exit(1);
    }
}
