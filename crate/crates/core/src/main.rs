use clap::Parser;

use aghf::cli::{init_logging, run, Cli, EXIT_CONFIG, EXIT_OK};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    init_logging(cli.quiet);
    std::process::exit(run(cli));
}
