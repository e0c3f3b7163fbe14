fn main() {
    std::process::exit(auglin::cli::cli_main(std::env::args_os()));
}
