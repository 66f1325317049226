use clap::Parser;

fn main() {
    let cli = ncbf_cli::commands::Cli::parse();
    let code = match ncbf_cli::commands::run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            1
        }
    };
    std::process::exit(code);
}
