use clap::Parser;
use inbetween_cli::{run, Cli, UsageError};

// 0 success, 1 usage error, 2 runtime error
fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version are successful exits
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    if let Err(e) = run(cli) {
        if e.downcast_ref::<UsageError>().is_some() {
            eprintln!("usage error: {e}");
            std::process::exit(1);
        }
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}
