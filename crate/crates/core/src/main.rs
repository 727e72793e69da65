fn main() {
    std::process::exit(gres2net::cli::main_with_args(std::env::args_os()));
}
