fn main() {
    std::process::exit(kvbudget::cli::main_with_args(std::env::args_os()));
}
