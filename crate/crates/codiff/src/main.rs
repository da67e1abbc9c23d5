use clap::Parser;

use codiff::cli;

fn main() {
    let parsed = match cli::Cli::try_parse() {
        Ok(p) => p,
        Err(e) => {
            // clap renders its own help/version output with code 0
            let code = if e.exit_code() == 0 { 0 } else { cli::EXIT_USAGE };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = cli::run(&parsed) {
        eprintln!("error: {e}");
        std::process::exit(cli::exit_code(&e));
    }
}
