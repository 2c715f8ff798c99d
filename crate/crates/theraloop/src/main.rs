use clap::Parser;
use theraloop::app::{self, Cli};

fn main() {
    let cli = Cli::parse();
    match app::run(&cli) {
        Ok(out) => print!("{out}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
