fn main() {
    std::process::exit(multibreath::cli::run(std::env::args_os().collect()));
}
