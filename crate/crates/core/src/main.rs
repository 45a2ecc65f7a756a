fn main() {
    std::process::exit(lmft::cli::run(std::env::args_os()));
}
