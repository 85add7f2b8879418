fn main() {
    std::process::exit(entdiff::cli::run(std::env::args_os()));
}
