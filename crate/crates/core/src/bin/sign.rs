fn main() {
    std::process::exit(sign::cli::main_with_args(std::env::args_os()));
}
