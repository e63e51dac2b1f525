fn main() {
    std::process::exit(lrtuner::cli::main_with_args(std::env::args_os()));
}
