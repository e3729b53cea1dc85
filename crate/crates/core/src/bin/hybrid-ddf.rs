fn main() {
    std::process::exit(hybrid_ddf::cli::main_with_args(std::env::args_os()));
}
