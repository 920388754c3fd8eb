use clap::Parser;
use errcalc_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("errcalc: {e}");
        std::process::exit(e.exit_code());
    }
}
