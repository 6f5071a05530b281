use clap::Parser;
use rppg_cli::{run, Cli, EXIT_OK};

fn main() {
    let cli = Cli::parse();
    let code = match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let record = e.record();
            match serde_json::to_string(&record) {
                Ok(line) => eprintln!("{line}"),
                Err(_) => eprintln!("{e}"),
            }
            record.exit_code
        }
    };
    std::process::exit(code);
}
