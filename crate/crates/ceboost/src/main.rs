fn main() {
    std::process::exit(ceboost::cli::main_with_args(std::env::args_os()));
}
