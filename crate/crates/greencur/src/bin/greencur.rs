fn main() {
    std::process::exit(greencur::cli::main_with_args(std::env::args_os()));
}
