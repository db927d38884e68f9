fn main() {
    std::process::exit(qsde::cli::main_with_args(std::env::args_os()));
}
