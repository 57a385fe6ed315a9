use clap::Parser;
use probatlas_cli::{run, Cli, Failure};

fn main() {
    // Die quietly when piped into `head` instead of panicking in println!.
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    // clap exits with 2 on bad usage and 0 for --help.
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(f) = run(cli) {
        match &f {
            Failure::Usage(msg) => {
                eprintln!("error: {msg}");
                eprintln!("\nFor more information, try '--help'.");
            }
            Failure::Runtime(e) => eprintln!("error: {e:#}"),
        }
        std::process::exit(f.exit_code());
    }
}
