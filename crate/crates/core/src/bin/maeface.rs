fn main() {
    std::process::exit(maeface::cli::run(std::env::args_os()));
}
