fn main() {
    std::process::exit(uad::cli::run(std::env::args_os()));
}
