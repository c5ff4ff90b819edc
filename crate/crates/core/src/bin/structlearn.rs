fn main() {
    std::process::exit(structlearn::cli::run(std::env::args_os()));
}
