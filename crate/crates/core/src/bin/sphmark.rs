fn main() {
    std::process::exit(sphmark::cli::run(std::env::args_os()));
}
