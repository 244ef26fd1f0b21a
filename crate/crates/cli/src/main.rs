use clap::Parser;

fn main() {
    match flor_cli::run(flor_cli::Cli::parse()) {
        Ok(out) => println!("{out}"),
        Err(e) => {
            let cause = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {cause}");
            std::process::exit(1);
        }
    }
}
