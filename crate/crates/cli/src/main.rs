fn main() {
    std::process::exit(reid_cli::main_with_args(std::env::args_os()));
}
