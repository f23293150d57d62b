fn main() {
    std::process::exit(ibft_cli::commands::main_with_args(std::env::args_os().collect()));
}
