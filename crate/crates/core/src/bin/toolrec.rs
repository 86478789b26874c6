fn main() {
    std::process::exit(toolrec::cli::main_with_args(std::env::args_os()));
}
