fn main() {
    std::process::exit(bandcontrol::cli::main_with_args(std::env::args_os()));
}
