fn main() {
    std::process::exit(sapnet::cli::main_with_args(std::env::args_os()));
}
