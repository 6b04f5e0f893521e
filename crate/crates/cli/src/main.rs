fn main() {
    std::process::exit(brainlang_cli::app::run(std::env::args_os()));
}
