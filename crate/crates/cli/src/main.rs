fn main() {
    std::process::exit(vton_cli::run(std::env::args_os()));
}
