fn main() {
    std::process::exit(genhai_cli::main_with_args(std::env::args_os()));
}
