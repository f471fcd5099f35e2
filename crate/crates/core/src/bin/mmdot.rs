fn main() {
    std::process::exit(mmdot::cli::run(std::env::args_os()));
}
