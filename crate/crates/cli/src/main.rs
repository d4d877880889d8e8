use clap::Parser;

fn main() {
    let cli = pdm_cli::Cli::parse();
    if let Err(err) = pdm_cli::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(pdm_cli::exit_code(&err));
    }
}
