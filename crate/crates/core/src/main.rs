use clap::Parser;
use ssmflow::cli::{execute, Cli};

fn main() {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(report) => {
            println!("{}", report.summary);
            println!("manifest: {}", report.manifest_path.display());
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
