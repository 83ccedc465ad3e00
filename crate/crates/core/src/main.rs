fn main() {
    std::process::exit(labelprop::cli::main_with_args(std::env::args_os()));
}
