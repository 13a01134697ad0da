use clap::Parser;

use tokenforge::commands::{run, Cli};

fn main() {
    // clap exits with 2 on usage errors and 0 for --help / --version
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
