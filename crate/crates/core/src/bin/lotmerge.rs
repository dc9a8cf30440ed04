fn main() {
    std::process::exit(lotmerge::cli::run(std::env::args_os()));
}
