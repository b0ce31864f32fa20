fn main() {
    std::process::exit(melformer::cli::run(std::env::args_os()));
}
