fn main() {
    std::process::exit(asem::cli::run(std::env::args_os()));
}
