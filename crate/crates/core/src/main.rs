fn main() {
    std::process::exit(gahcda::cli::run(std::env::args_os()));
}
