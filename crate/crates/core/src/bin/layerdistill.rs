fn main() {
    std::process::exit(layerdistill::cli::main_with_args(std::env::args_os()));
}
