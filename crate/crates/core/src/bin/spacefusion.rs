fn main() {
    std::process::exit(spacefusion::cli::main_with_args(std::env::args_os()));
}
