use clap::Parser;

fn main() -> std::process::ExitCode {
    let cli = fcadapt::cli::Cli::parse();
    std::process::ExitCode::from(fcadapt::cli::run(cli))
}
