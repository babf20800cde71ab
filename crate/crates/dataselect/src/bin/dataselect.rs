fn main() {
    std::process::exit(dataselect::cli::main_with_args(std::env::args_os()));
}
