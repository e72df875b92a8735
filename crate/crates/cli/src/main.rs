fn main() {
    std::process::exit(hypolift_cli::run(std::env::args_os()));
}
