fn main() {
    std::process::exit(sweep_cli::run_cli(std::env::args_os()));
}
