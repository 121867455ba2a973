fn main() {
    std::process::exit(primscene::cli::run(std::env::args_os()));
}
