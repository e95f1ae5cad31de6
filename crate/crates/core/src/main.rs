fn main() {
    std::process::exit(codeq::cli::main_with_args(std::env::args_os()));
}
