fn main() {
    std::process::exit(cfdetect::cli::run(std::env::args_os()));
}
