fn main() {
    std::process::exit(steplab::cli::run(std::env::args_os()));
}
