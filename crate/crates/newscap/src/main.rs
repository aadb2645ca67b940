fn main() {
    std::process::exit(newscap::cli::run(std::env::args_os()));
}
