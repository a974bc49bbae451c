fn main() {
    std::process::exit(airformer::cli::run(std::env::args_os()));
}
