fn main() {
    std::process::exit(contract_slide::cli::run_cli(std::env::args_os()));
}
