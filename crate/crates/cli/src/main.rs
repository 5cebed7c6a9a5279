use clap::Parser;
use neurolrp_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        let msg = format!("{e:#}").replace('\n', " ");
        eprintln!("neurolrp: {msg}");
        std::process::exit(1);
    }
}
