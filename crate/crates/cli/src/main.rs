use clap::Parser;

use outview_cli::commands::{run, Cli};

fn main() {
    // Usage errors exit with 2, help and version with 0.
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let msg = e.to_string().replace('\n', " ");
        eprintln!("error: {msg}");
        std::process::exit(1);
    }
}
