fn main() {
    std::process::exit(tokenct::cli::run(std::env::args_os()));
}
