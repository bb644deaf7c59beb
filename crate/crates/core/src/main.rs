fn main() {
    std::process::exit(cacc::cli::run(std::env::args_os()));
}
