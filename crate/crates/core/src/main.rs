use clap::Parser;
use semfilter::cli::{error_record, run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => println!("{}", serde_json::to_string(&summary).expect("summary serializes")),
        Err(e) => {
            eprintln!("{}", error_record(Some(cli.command), &e));
            std::process::exit(1);
        }
    }
}
